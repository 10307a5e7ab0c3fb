import numpy as np
import pytest
import yaml

from fedlab.cli import main
from fedlab.datasets import LabeledData, save_dataset
from fedlab.federation import ClientUpdate, save_update
from fedlab.linalg import load_matrix, save_matrix
from fedlab.rpca import robust_pca


def base_config(tmp_path, **overrides):
    config = {
        "seed": 3,
        "output_dir": str(tmp_path / "out"),
        "model": {"input_dim": 6, "num_classes": 3, "hidden_dims": [8], "rank": 2},
        "data": {
            "synthetic": {
                "train_per_class": 30,
                "test_per_class": 10,
                "source_per_class": 20,
                "noise": 0.5,
                "shift": 0.8,
            }
        },
        "federation": {
            "rounds": 2,
            "num_clients": 3,
            "dirichlet_alpha": 0.5,
            "local_epochs": 1,
            "batch_size": 16,
            "lr": 1e-3,
        },
        "aggregator": {"kind": "fedavg"},
        "pretrain": {"epochs": 5},
    }
    config.update(overrides)
    return config


def write_config(tmp_path, config, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(config))
    return path


class TestRun:
    def test_produces_outputs_and_exit_zero(self, tmp_path, capsys):
        path = write_config(tmp_path, base_config(tmp_path))
        assert main(["run", str(path)]) == 0
        out = tmp_path / "out"
        assert (out / "metrics.csv").exists()
        assert (out / "rpca_trace.csv").exists()
        assert (out / "partition.txt").exists()
        assert (out / "resolved_config.yaml").exists()
        assert (out / "final_checkpoint" / "manifest.json").exists()
        stdout = capsys.readouterr().out
        assert "final accuracy:" in stdout
        assert "R@90" in stdout

    def test_repeat_runs_bit_identical(self, tmp_path):
        cfg = base_config(tmp_path)
        path = write_config(tmp_path, cfg)
        assert main(["run", str(path)]) == 0
        first = (tmp_path / "out" / "metrics.csv").read_bytes()
        first_trace = (tmp_path / "out" / "rpca_trace.csv").read_bytes()
        assert main(["run", str(path)]) == 0
        assert (tmp_path / "out" / "metrics.csv").read_bytes() == first
        assert (tmp_path / "out" / "rpca_trace.csv").read_bytes() == first_trace

    def test_threads_do_not_change_outputs(self, tmp_path):
        cfg = base_config(tmp_path, aggregator={"kind": "fedrpca"})
        path = write_config(tmp_path, cfg)
        assert main(["run", str(path), "--threads", "1"]) == 0
        single = (tmp_path / "out" / "metrics.csv").read_bytes()
        assert main(["run", str(path), "--threads", "4"]) == 0
        assert (tmp_path / "out" / "metrics.csv").read_bytes() == single

    def test_aggregator_flag_overrides_config(self, tmp_path):
        cfg = base_config(tmp_path)
        path = write_config(tmp_path, cfg)
        assert main(["run", str(path), "--aggregator", "scaled"]) == 0
        resolved = yaml.safe_load((tmp_path / "out" / "resolved_config.yaml").read_text())
        assert resolved["aggregator"]["kind"] == "scaled"

    def test_same_seed_same_initial_accuracy_across_aggregators(self, tmp_path):
        from fedlab.diagnostics import read_metrics

        cfg = base_config(tmp_path, output_dir=str(tmp_path / "a"))
        main(["run", str(write_config(tmp_path, cfg, "a.yaml"))])
        cfg = base_config(tmp_path, output_dir=str(tmp_path / "b"),
                          aggregator={"kind": "fedrpca"})
        main(["run", str(write_config(tmp_path, cfg, "b.yaml"))])
        first = read_metrics(tmp_path / "a" / "metrics.csv")
        second = read_metrics(tmp_path / "b" / "metrics.csv")
        # round 0 consumes identical local updates, so only aggregation differs;
        # both series exist and cover the same rounds
        assert [m.round for m in first] == [m.round for m in second]

    def test_unknown_aggregator_exits_2(self, tmp_path, capsys):
        cfg = base_config(tmp_path, aggregator={"kind": "mystery"})
        path = write_config(tmp_path, cfg)
        assert main(["run", str(path)]) == 2
        assert "fedavg" in capsys.readouterr().err

    def test_unknown_key_exits_2(self, tmp_path):
        cfg = base_config(tmp_path)
        cfg["federation"]["typo_key"] = 1
        assert main(["run", str(write_config(tmp_path, cfg))]) == 2

    def test_missing_config_exits_3(self, tmp_path):
        assert main(["run", str(tmp_path / "nope.yaml")]) == 3

    def test_rank_too_large_exits_2(self, tmp_path, capsys):
        cfg = base_config(tmp_path)
        cfg["model"]["rank"] = 7  # exceeds min(d_out, d_in) = 3
        assert main(["run", str(write_config(tmp_path, cfg))]) == 2
        assert "rank" in capsys.readouterr().err

    def test_missing_seed_exits_2(self, tmp_path, monkeypatch):
        monkeypatch.delenv("FEDLAB_SEED", raising=False)
        cfg = base_config(tmp_path)
        del cfg["seed"]
        assert main(["run", str(write_config(tmp_path, cfg))]) == 2

    def test_seed_env_var_fallback(self, tmp_path, monkeypatch):
        cfg = base_config(tmp_path)
        del cfg["seed"]
        monkeypatch.setenv("FEDLAB_SEED", "11")
        path = write_config(tmp_path, cfg)
        assert main(["run", str(path)]) == 0
        resolved = yaml.safe_load((tmp_path / "out" / "resolved_config.yaml").read_text())
        assert resolved["seed"] == 11

    def test_file_based_datasets(self, tmp_path):
        rng = np.random.default_rng(0)
        train = LabeledData(rng.standard_normal((4, 60)), rng.integers(0, 3, 60))
        test = LabeledData(rng.standard_normal((4, 20)), rng.integers(0, 3, 20))
        save_dataset(train, tmp_path / "x.txt", tmp_path / "y.txt")
        save_dataset(test, tmp_path / "xt.txt", tmp_path / "yt.txt")
        cfg = base_config(tmp_path, data={
            "features": str(tmp_path / "x.txt"),
            "labels": str(tmp_path / "y.txt"),
            "test_features": str(tmp_path / "xt.txt"),
            "test_labels": str(tmp_path / "yt.txt"),
        })
        cfg["model"] = {"input_dim": 4, "num_classes": 3, "hidden_dims": [6], "rank": 2}
        assert main(["run", str(write_config(tmp_path, cfg))]) == 0

    def test_missing_dataset_file_exits_3(self, tmp_path):
        cfg = base_config(tmp_path, data={
            "features": str(tmp_path / "missing.txt"),
            "labels": str(tmp_path / "missing_y.txt"),
            "test_features": str(tmp_path / "missing.txt"),
            "test_labels": str(tmp_path / "missing_y.txt"),
        })
        assert main(["run", str(write_config(tmp_path, cfg))]) == 3


class TestPretrainCommand:
    def test_writes_checkpoint(self, tmp_path, capsys):
        path = write_config(tmp_path, base_config(tmp_path))
        assert main(["pretrain", str(path)]) == 0
        assert (tmp_path / "out" / "checkpoint" / "manifest.json").exists()
        assert "checkpoint:" in capsys.readouterr().out

    def test_run_can_reuse_checkpoint(self, tmp_path):
        path = write_config(tmp_path, base_config(tmp_path))
        assert main(["pretrain", str(path)]) == 0
        cfg = base_config(tmp_path)
        cfg["pretrain"]["checkpoint"] = str(tmp_path / "out" / "checkpoint")
        cfg["output_dir"] = str(tmp_path / "out2")
        assert main(["run", str(write_config(tmp_path, cfg, "reuse.yaml"))]) == 0


class TestRpcaCommand:
    def test_zero_matrix(self, tmp_path, capsys):
        save_matrix(tmp_path / "m.txt", np.zeros((3, 3)))
        code = main(["rpca", str(tmp_path / "m.txt"), str(tmp_path / "L.txt"),
                     str(tmp_path / "S.txt")])
        assert code == 0
        assert not load_matrix(tmp_path / "L.txt").any()
        assert not load_matrix(tmp_path / "S.txt").any()
        out = capsys.readouterr().out
        assert "iterations: 0" in out
        assert "converged: true" in out

    def test_matches_library_decomposition(self, tmp_path):
        rng = np.random.default_rng(5)
        m = rng.standard_normal((20, 8))
        save_matrix(tmp_path / "m.txt", m)
        assert main(["rpca", str(tmp_path / "m.txt"), str(tmp_path / "L.txt"),
                     str(tmp_path / "S.txt")]) == 0
        dec = robust_pca(m)
        np.testing.assert_array_equal(load_matrix(tmp_path / "L.txt"), dec.low_rank)
        np.testing.assert_array_equal(load_matrix(tmp_path / "S.txt"), dec.sparse)

    def test_missing_input_exits_3(self, tmp_path):
        assert main(["rpca", str(tmp_path / "none.txt"), str(tmp_path / "L.txt"),
                     str(tmp_path / "S.txt")]) == 3


class TestSimilarityCommand:
    def _dump(self, tmp_path, vectors):
        rng = np.random.default_rng(0)
        for cid, v in enumerate(vectors):
            save_update(tmp_path / "updates",
                        ClientUpdate(cid, [(v.reshape(2, 3), np.zeros((3, 2)))]))

    def test_identical_updates_mean_one(self, tmp_path, capsys):
        v = np.arange(1.0, 7.0)
        self._dump(tmp_path, [v, v])
        assert main(["similarity", str(tmp_path / "updates"), str(tmp_path / "C.txt")]) == 0
        out = capsys.readouterr().out
        assert "mean off-diagonal similarity: 1" in out
        np.testing.assert_allclose(load_matrix(tmp_path / "C.txt"), np.ones((2, 2)))

    def test_single_update_mean_zero(self, tmp_path, capsys):
        self._dump(tmp_path, [np.arange(1.0, 7.0)])
        assert main(["similarity", str(tmp_path / "updates"), str(tmp_path / "C.txt")]) == 0
        assert "mean off-diagonal similarity: 0" in capsys.readouterr().out
        assert load_matrix(tmp_path / "C.txt").shape == (1, 1)

    def test_empty_directory_exits_2(self, tmp_path):
        (tmp_path / "updates").mkdir()
        assert main(["similarity", str(tmp_path / "updates"), str(tmp_path / "C.txt")]) == 2

    def test_malformed_dump_exits_3(self, tmp_path):
        client = tmp_path / "updates" / "client_0000"
        client.mkdir(parents=True)
        (client / "layer00_dA.txt").write_text("not a matrix\n")
        (client / "layer00_dB.txt").write_text("1 1\n0\n")
        assert main(["similarity", str(tmp_path / "updates"), str(tmp_path / "C.txt")]) == 3

    def test_per_matrix_flag(self, tmp_path, capsys):
        self._dump(tmp_path, [np.arange(1.0, 7.0), np.arange(1.0, 7.0)])
        assert main(["similarity", str(tmp_path / "updates"), str(tmp_path / "C.txt"),
                     "--matrix", "A", "--layer", "0"]) == 0
        assert "mean off-diagonal similarity: 1" in capsys.readouterr().out
