"""Command-line entry point: pretrain, run, rpca, similarity.

Experiments are described by a YAML config (see README for an annotated
example). Flags override config values, and the fully-resolved config is
dumped next to the outputs for provenance. Exit codes: 0 ok, 2 config
error, 3 I/O error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import aggregation, diagnostics, federation, model
from .datasets import (
    LabeledData,
    SyntheticSpec,
    load_dataset,
    make_benchmark,
    save_partition,
)
from .errors import ConfigError, NumericError, ParseError
from .linalg import load_matrix, save_matrix
from .rpca import RPCAConfig, robust_pca

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

SEED_ENV_VAR = "FEDLAB_SEED"


# ---------------------------------------------------------------------------
# config loading


@dataclass
class RunConfig:
    seed: int
    output_dir: Path
    model: model.ModelConfig
    federation: federation.FederationConfig
    aggregator: aggregation.AggregatorSpec
    data_files: dict | None
    synthetic: SyntheticSpec | None
    data_seed: int
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-2
    pretrain_weight_decay: float = 0.0
    checkpoint: Path | None = None
    record_timing: bool = False
    threads: int = 1
    dump_updates_round: int | None = None

    def resolved(self) -> dict:
        """Plain-YAML view of every effective setting."""
        out = {
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "model": {
                "input_dim": self.model.input_dim,
                "num_classes": self.model.num_classes,
                "hidden_dims": list(self.model.hidden_dims),
                "rank": self.model.rank,
            },
            "federation": {
                "rounds": self.federation.rounds,
                "num_clients": self.federation.num_clients,
                "dirichlet_alpha": self.federation.dirichlet_alpha,
                "local_epochs": self.federation.local_epochs,
                "batch_size": self.federation.batch_size,
                "client_method": self.federation.client_method,
                "fedprox_mu": self.federation.fedprox_mu,
                "optimizer": self.federation.optimizer,
                "lr": self.federation.lr,
                "weight_decay": self.federation.weight_decay,
                "participation": self.federation.participation,
            },
            "aggregator": {
                "kind": self.aggregator.kind,
                "beta": self.aggregator.beta,
                "keep_fraction": self.aggregator.keep_fraction,
                "beta_mode": self.aggregator.beta_mode,
                "beta_max": self.aggregator.beta_max,
                "rpca": {
                    "mu": self.aggregator.rpca.mu,
                    "lam": self.aggregator.rpca.lam,
                    "tol": self.aggregator.rpca.tol,
                    "max_iter": self.aggregator.rpca.max_iter,
                },
            },
            "pretrain": {
                "epochs": self.pretrain_epochs,
                "lr": self.pretrain_lr,
                "weight_decay": self.pretrain_weight_decay,
                "checkpoint": str(self.checkpoint) if self.checkpoint else None,
            },
            "record_timing": self.record_timing,
            "threads": self.threads,
            "dump_updates_round": self.dump_updates_round,
        }
        if self.synthetic is not None:
            out["data"] = {
                "synthetic": {
                    "train_per_class": self.synthetic.train_per_class,
                    "test_per_class": self.synthetic.test_per_class,
                    "source_per_class": self.synthetic.source_per_class,
                    "noise": self.synthetic.noise,
                    "shift": self.synthetic.shift,
                    "mean_scale": self.synthetic.mean_scale,
                    "seed": self.data_seed,
                }
            }
        else:
            out["data"] = dict(self.data_files)
        return out


def _require_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _build(cls, section: dict, where: str):
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def load_config(path, seed_override=None, aggregator_override=None,
                threads_override=None) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")

    _require_keys(raw, {"seed", "output_dir", "model", "data", "federation", "aggregator",
                        "pretrain", "record_timing", "threads", "dump_updates_round"},
                  "config")

    seed = seed_override if seed_override is not None else raw.get("seed")
    if seed is None and SEED_ENV_VAR in os.environ:
        try:
            seed = int(os.environ[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from None
    if seed is None:
        raise ConfigError(f"no seed: set 'seed' in the config, pass --seed, or export {SEED_ENV_VAR}")
    seed = int(seed)

    if "output_dir" not in raw:
        raise ConfigError("config must set output_dir")
    output_dir = Path(raw["output_dir"])

    model_section = dict(raw.get("model") or {})
    _require_keys(model_section, {"input_dim", "num_classes", "hidden_dims", "rank"}, "model")
    if "hidden_dims" in model_section:
        model_section["hidden_dims"] = tuple(model_section["hidden_dims"])
    model_cfg = _build(model.ModelConfig, model_section, "model config")

    fed_section = dict(raw.get("federation") or {})
    _require_keys(fed_section, {"rounds", "num_clients", "dirichlet_alpha", "local_epochs",
                                "batch_size", "client_method", "fedprox_mu", "optimizer",
                                "lr", "weight_decay", "participation"}, "federation")
    fed_section["seed"] = seed
    fed_cfg = _build(federation.FederationConfig, fed_section, "federation config")

    agg_section = dict(raw.get("aggregator") or {})
    _require_keys(agg_section, {"kind", "beta", "keep_fraction", "beta_mode", "beta_max",
                                "rpca"}, "aggregator")
    if aggregator_override is not None:
        agg_section["kind"] = aggregator_override
    rpca_section = dict(agg_section.pop("rpca", None) or {})
    _require_keys(rpca_section, {"mu", "lam", "tol", "max_iter"}, "aggregator.rpca")
    agg_section["rpca"] = _build(RPCAConfig, rpca_section, "rpca config")
    agg_spec = _build(aggregation.AggregatorSpec, agg_section, "aggregator spec")

    data_section = dict(raw.get("data") or {})
    synthetic = None
    data_files = None
    data_seed = seed
    if "synthetic" in data_section:
        _require_keys(data_section, {"synthetic"}, "data")
        synth = dict(data_section["synthetic"] or {})
        _require_keys(synth, {"train_per_class", "test_per_class", "source_per_class",
                              "noise", "shift", "mean_scale", "seed"}, "data.synthetic")
        data_seed = int(synth.pop("seed", seed))
        synthetic = _build(
            SyntheticSpec,
            {"num_classes": model_cfg.num_classes, "input_dim": model_cfg.input_dim, **synth},
            "synthetic data spec",
        )
    else:
        _require_keys(data_section, {"features", "labels", "test_features", "test_labels",
                                     "source_features", "source_labels"}, "data")
        if not data_section:
            raise ConfigError("config must provide data: either a synthetic block or file paths")
        data_files = {k: str(v) for k, v in data_section.items()}

    pre_section = dict(raw.get("pretrain") or {})
    _require_keys(pre_section, {"epochs", "lr", "weight_decay", "checkpoint"}, "pretrain")

    threads = threads_override if threads_override is not None else int(raw.get("threads", 1))
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")

    dump_round = raw.get("dump_updates_round")
    return RunConfig(
        seed=seed,
        output_dir=output_dir,
        model=model_cfg,
        federation=fed_cfg,
        aggregator=agg_spec,
        data_files=data_files,
        synthetic=synthetic,
        data_seed=data_seed,
        pretrain_epochs=int(pre_section.get("epochs", 30)),
        pretrain_lr=float(pre_section.get("lr", 1e-2)),
        pretrain_weight_decay=float(pre_section.get("weight_decay", 0.0)),
        checkpoint=Path(pre_section["checkpoint"]) if pre_section.get("checkpoint") else None,
        record_timing=bool(raw.get("record_timing", False)),
        threads=threads,
        dump_updates_round=int(dump_round) if dump_round is not None else None,
    )


def _load_file_split(files: dict, feat_key: str, label_key: str, what: str) -> LabeledData:
    if feat_key not in files or label_key not in files:
        raise ConfigError(f"data section must name {feat_key} and {label_key} for {what}")
    return load_dataset(files[feat_key], files[label_key])


def _load_data(cfg: RunConfig):
    """(source, train, test) splits from the synthetic spec or from files."""
    if cfg.synthetic is not None:
        return make_benchmark(cfg.synthetic, cfg.data_seed)
    files = cfg.data_files
    train = _load_file_split(files, "features", "labels", "the training split")
    test = _load_file_split(files, "test_features", "test_labels", "the test split")
    if "source_features" in files:
        source = _load_file_split(files, "source_features", "source_labels",
                                  "the pretraining split")
    else:
        source = train
    return source, train, test


def _dump_resolved(cfg: RunConfig) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    with (cfg.output_dir / "resolved_config.yaml").open("w") as fh:
        yaml.safe_dump(cfg.resolved(), fh, sort_keys=False)


def _base_layers(cfg: RunConfig, source: LabeledData):
    """Load the frozen base from a checkpoint, or pretrain it from source data."""
    if cfg.checkpoint is not None:
        ckpt_cfg, layers, _ = model.load_checkpoint(cfg.checkpoint)
        if (ckpt_cfg.input_dim, ckpt_cfg.num_classes) != (cfg.model.input_dim,
                                                          cfg.model.num_classes):
            raise ConfigError(
                f"checkpoint at {cfg.checkpoint} was built for "
                f"{ckpt_cfg.input_dim}->{ckpt_cfg.num_classes}, config wants "
                f"{cfg.model.input_dim}->{cfg.model.num_classes}"
            )
        return layers
    return model.pretrain(
        source.features, source.labels, cfg.model, cfg.pretrain_epochs, cfg.seed,
        lr=cfg.pretrain_lr, weight_decay=cfg.pretrain_weight_decay,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    source, _, _ = _load_data(cfg)
    layers = model.pretrain(
        source.features, source.labels, cfg.model, cfg.pretrain_epochs, cfg.seed,
        lr=cfg.pretrain_lr, weight_decay=cfg.pretrain_weight_decay,
    )
    _dump_resolved(cfg)
    ckpt_dir = cfg.output_dir / "checkpoint"
    model.save_checkpoint(ckpt_dir, cfg.model, layers)
    accuracy, loss = model.evaluate(
        layers, model.init_adapters(cfg.model, cfg.seed), source.features, source.labels
    )
    print(f"checkpoint: {ckpt_dir}")
    print(f"source accuracy: {accuracy:.6f} (loss {loss:.6f})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed,
                      aggregator_override=args.aggregator, threads_override=args.threads)
    source, train, test = _load_data(cfg)
    layers = _base_layers(cfg, source)
    adapters = model.init_adapters(cfg.model, cfg.seed)

    indices = federation.dirichlet_indices(
        train.labels, cfg.federation.num_clients, cfg.federation.dirichlet_alpha, cfg.seed
    )
    shards = [train.subset(idx) for idx in indices]
    server = federation.init_server(layers, adapters, cfg.federation)

    _dump_resolved(cfg)
    save_partition(cfg.output_dir / "partition.txt", indices)
    server, series = federation.run(
        server, shards, cfg.aggregator, cfg.federation, test,
        threads=cfg.threads, record_timing=cfg.record_timing,
        dump_updates_round=cfg.dump_updates_round,
        dump_dir=cfg.output_dir / "updates",
    )
    diagnostics.write_metrics(series, cfg.output_dir / "metrics.csv")
    model.save_checkpoint(cfg.output_dir / "final_checkpoint", cfg.model, layers,
                          server.adapters)

    if series:
        final_accuracy = series[-1].test_accuracy
        reach = diagnostics.rounds_to_target(series, 0.9 * final_accuracy)
        print(f"final accuracy: {final_accuracy:.6f}")
        print(f"R@90 (rounds to 90% of final accuracy): {reach if reach is not None else 'n/a'}")
    else:
        accuracy, _ = model.evaluate(layers, adapters, test.features, test.labels)
        print(f"final accuracy: {accuracy:.6f}")
        print("R@90 (rounds to 90% of final accuracy): n/a")
    return EXIT_OK


def cmd_rpca(args) -> int:
    m = load_matrix(args.matrix)
    cfg = RPCAConfig(mu=args.mu, lam=args.lam, tol=args.tol, max_iter=args.max_iter)
    result = robust_pca(m, cfg)
    save_matrix(args.low_rank_out, result.low_rank)
    save_matrix(args.sparse_out, result.sparse)
    print(f"iterations: {result.iterations}")
    print(f"residual: {result.residual:.17g}")
    print(f"converged: {'true' if result.converged else 'false'}")
    return EXIT_OK


def cmd_similarity(args) -> int:
    updates = federation.load_updates(args.updates_dir)
    if not updates:
        raise ConfigError(f"no client update dumps found under {args.updates_dir}")
    if args.layer is not None and not 0 <= args.layer < len(updates[0].deltas):
        raise ConfigError(f"layer {args.layer} out of range (dumps have "
                          f"{len(updates[0].deltas)} layers)")
    if args.layer is not None or args.matrix != "all":
        columns = []
        for u in updates:
            layers = u.deltas if args.layer is None else [u.deltas[args.layer]]
            parts = []
            for d_a, d_b in layers:
                if args.matrix in ("A", "all"):
                    parts.append(np.ravel(d_a, order="F"))
                if args.matrix in ("B", "all"):
                    parts.append(np.ravel(d_b, order="F"))
            columns.append(np.concatenate(parts))
        sim = diagnostics.column_cosine_similarity(np.column_stack(columns))
    else:
        sim = diagnostics.cosine_similarity_matrix(updates)
    save_matrix(args.out, sim)
    print(f"mean off-diagonal similarity: {diagnostics.mean_offdiagonal(sim):.17g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and exit-code mapping


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlab",
        description="Federated LoRA fine-tuning experiments with robust-PCA aggregation.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train and freeze the base model")
    p.add_argument("config", help="YAML run config")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run a federated experiment")
    p.add_argument("config", help="YAML run config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--aggregator", default=None, choices=aggregation.AGGREGATOR_KINDS,
                   help="override the configured aggregator")
    p.add_argument("--threads", type=int, default=None,
                   help="max concurrent clients (results are identical for any value)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("rpca", help="decompose a matrix file into low-rank + sparse parts")
    p.add_argument("matrix", help="input matrix text file")
    p.add_argument("low_rank_out", help="output file for the low-rank part")
    p.add_argument("sparse_out", help="output file for the sparse part")
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--max-iter", type=int, default=1000)
    p.set_defaults(func=cmd_rpca)

    p = sub.add_parser("similarity", help="pairwise cosine similarity of dumped updates")
    p.add_argument("updates_dir", help="directory of client_* update dumps")
    p.add_argument("out", help="output matrix text file")
    p.add_argument("--layer", type=int, default=None, help="restrict to one layer")
    p.add_argument("--matrix", choices=("A", "B", "all"), default="all",
                   help="restrict to one adapter matrix")
    p.set_defaults(func=cmd_similarity)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
