"""A small ReLU classifier with frozen dense layers and trainable LoRA adapters.

Each layer computes ``(W0 + B @ A) @ x + b0`` where W0, b0 are frozen after
pretraining and only the low-rank factors A (r x d_in) and B (d_out x r)
train. B starts at zero so a freshly adapted model reproduces the base model
exactly. Gradients are analytic (softmax cross-entropy backprop restricted
to the adapter factors) and are checked against finite differences in the
test suite.

Inputs are column-major: a batch is a ``d_in x batch`` array and logits come
back as ``num_classes x batch``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .linalg import as_matrix, load_matrix, save_matrix

__all__ = [
    "ModelConfig",
    "DenseLayer",
    "LoRAAdapter",
    "AdamWConfig",
    "AdamWState",
    "layer_dims",
    "init_adapters",
    "forward",
    "loss_and_grad",
    "evaluate",
    "sgd_step",
    "init_adamw_state",
    "adamw_step",
    "pretrain",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = (32,)
    rank: int = 4

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden dims must be positive, got {self.hidden_dims}")
        if self.rank < 1:
            raise ValueError(f"rank must be positive, got {self.rank}")
        limit = min(min(d_out, d_in) for d_out, d_in in layer_dims(self))
        if self.rank > limit:
            raise ValueError(f"rank {self.rank} exceeds the smallest layer dimension {limit}")


def layer_dims(config: ModelConfig) -> list[tuple[int, int]]:
    """(d_out, d_in) pairs for every dense layer, input to output."""
    dims = [config.input_dim, *config.hidden_dims, config.num_classes]
    return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


def _frozen(x: np.ndarray) -> np.ndarray:
    out = np.array(x, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class DenseLayer:
    """Frozen base weights; the arrays are locked read-only at construction."""

    w0: np.ndarray  # d_out x d_in
    b0: np.ndarray  # d_out x 1

    def __post_init__(self):
        object.__setattr__(self, "w0", _frozen(as_matrix(self.w0, "w0")))
        object.__setattr__(self, "b0", _frozen(as_matrix(self.b0, "b0")))
        if self.b0.shape != (self.w0.shape[0], 1):
            raise ValueError(f"bias shape {self.b0.shape} does not match weight {self.w0.shape}")


@dataclass(frozen=True)
class LoRAAdapter:
    a: np.ndarray  # r x d_in
    b: np.ndarray  # d_out x r

    def __post_init__(self):
        object.__setattr__(self, "a", as_matrix(self.a, "a"))
        object.__setattr__(self, "b", as_matrix(self.b, "b"))
        if self.a.shape[0] != self.b.shape[1]:
            raise ValueError(f"rank mismatch between factors: {self.a.shape} vs {self.b.shape}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def delta_w(self) -> np.ndarray:
        """Effective dense update B @ A."""
        return self.b @ self.a


def init_adapters(config: ModelConfig, seed: int) -> list[LoRAAdapter]:
    """Fresh adapters: B exactly zero, A ~ N(0, 1/r) entries.

    With B = 0 the adapted model equals the base model, so round 0 of any
    run starts from the pretrained weights.
    """
    rng = np.random.default_rng([seed, 1])
    adapters = []
    for d_out, d_in in layer_dims(config):
        if config.rank > min(d_out, d_in):
            raise ValueError(
                f"rank {config.rank} exceeds min layer dimension {min(d_out, d_in)}"
            )
        a = rng.normal(0.0, 1.0 / np.sqrt(config.rank), size=(config.rank, d_in))
        b = np.zeros((d_out, config.rank))
        adapters.append(LoRAAdapter(a, b))
    return adapters


def _check_batch(layers, adapters, x):
    x = as_matrix(x, "x")
    if len(layers) != len(adapters):
        raise ValueError(f"{len(layers)} layers but {len(adapters)} adapters")
    if x.shape[0] != layers[0].w0.shape[1]:
        raise ValueError(f"input dim {x.shape[0]} does not match first layer {layers[0].w0.shape}")
    return x


def _activations(layers, adapters, x):
    """Layer inputs [x0, x1, ...] plus final logits; ReLU between layers."""
    acts = [x]
    h = x
    last = len(layers) - 1
    for k, (layer, adapter) in enumerate(zip(layers, adapters)):
        z = (layer.w0 + adapter.b @ adapter.a) @ h + layer.b0
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(layers, adapters, x: np.ndarray) -> np.ndarray:
    """Raw logits (num_classes x batch) of the adapted model."""
    x = _check_batch(layers, adapters, x)
    return _activations(layers, adapters, x)[-1]


def _check_labels(labels, num_classes, batch):
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ValueError(f"labels must have shape ({batch},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels out of range [0, {num_classes})")
    return labels


def loss_and_grad(layers, adapters, x, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the adapter factors.

    Only A and B receive gradients; the frozen base has no gradient slots.
    Returns ``(loss, grads)`` with grads a per-layer list of (dA, dB).
    """
    x = _check_batch(layers, adapters, x)
    batch = x.shape[1]
    num_classes = layers[-1].w0.shape[0]
    labels = _check_labels(labels, num_classes, batch)

    acts = _activations(layers, adapters, x)
    logits = acts[-1]
    cols = np.arange(batch)
    # mean cross-entropy via the numerically stable log-softmax
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    loss = float(-log_probs[labels, cols].mean())

    g = np.exp(log_probs)
    g[labels, cols] -= 1.0
    g /= batch

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    for k in range(len(layers) - 1, -1, -1):
        adapter = adapters[k]
        x_in = acts[k]
        d_b = g @ (adapter.a @ x_in).T
        d_a = adapter.b.T @ g @ x_in.T
        grads[k] = (d_a, d_b)
        if k > 0:
            w_eff = layers[k].w0 + adapter.b @ adapter.a
            g = (w_eff.T @ g) * (acts[k] > 0)
    return loss, grads


def evaluate(layers, adapters, x, labels) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) on a labeled batch."""
    x = _check_batch(layers, adapters, x)
    labels = _check_labels(labels, layers[-1].w0.shape[0], x.shape[1])
    logits = _activations(layers, adapters, x)[-1]
    predictions = logits.argmax(axis=0)
    accuracy = float((predictions == labels).mean())
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    loss = float(-log_probs[labels, np.arange(x.shape[1])].mean())
    return accuracy, loss


# ---------------------------------------------------------------------------
# optimizers (pure: they return new adapters, never mutate)


def sgd_step(adapters, grads, lr: float):
    if lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    return [
        LoRAAdapter(ad.a - lr * d_a, ad.b - lr * d_b)
        for ad, (d_a, d_b) in zip(adapters, grads)
    ]


@dataclass(frozen=True)
class AdamWConfig:
    """Decoupled weight decay Adam; defaults follow the fine-tuning setup."""

    lr: float = 1e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamWState:
    moments: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]  # (mA, vA, mB, vB)
    step: int = 0


def init_adamw_state(adapters) -> AdamWState:
    return AdamWState(
        moments=[
            (np.zeros_like(ad.a), np.zeros_like(ad.a), np.zeros_like(ad.b), np.zeros_like(ad.b))
            for ad in adapters
        ],
        step=0,
    )


def _adamw_update(theta, g, m, v, t, cfg: AdamWConfig):
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    theta = theta - cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta)
    return theta, m, v


def adamw_step(adapters, grads, state: AdamWState, cfg: AdamWConfig):
    """One AdamW step on every adapter factor; returns (adapters', state')."""
    t = state.step + 1
    new_adapters = []
    new_moments = []
    for ad, (d_a, d_b), (m_a, v_a, m_b, v_b) in zip(adapters, grads, state.moments):
        a, m_a, v_a = _adamw_update(ad.a, d_a, m_a, v_a, t, cfg)
        b, m_b, v_b = _adamw_update(ad.b, d_b, m_b, v_b, t, cfg)
        new_adapters.append(LoRAAdapter(a, b))
        new_moments.append((m_a, v_a, m_b, v_b))
    return new_adapters, AdamWState(moments=new_moments, step=t)


# ---------------------------------------------------------------------------
# pretraining of the full (to-be-frozen) base weights


def _full_loss_and_grad(weights, biases, x, labels):
    acts = [x]
    h = x
    last = len(weights) - 1
    for k, (w, b) in enumerate(zip(weights, biases)):
        z = w @ h + b
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    logits = acts[-1]
    batch = x.shape[1]
    cols = np.arange(batch)
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    loss = float(-log_probs[labels, cols].mean())
    g = np.exp(log_probs)
    g[labels, cols] -= 1.0
    g /= batch
    d_ws, d_bs = [None] * len(weights), [None] * len(weights)
    for k in range(len(weights) - 1, -1, -1):
        d_ws[k] = g @ acts[k].T
        d_bs[k] = g.sum(axis=1, keepdims=True)
        if k > 0:
            g = (weights[k].T @ g) * (acts[k] > 0)
    return loss, d_ws, d_bs


def pretrain(
    features: np.ndarray,
    labels: np.ndarray,
    config: ModelConfig,
    epochs: int,
    seed: int,
    lr: float = 1e-2,
    weight_decay: float = 0.0,
    batch_size: int = 32,
) -> list[DenseLayer]:
    """Train full weights from random init with AdamW; returns frozen layers.

    This stands in for a published pretrained backbone: the source data is
    drawn from the same feature space as the federated task but with a
    label-conditional mean shift, so fine-tuning has something to learn.
    Deterministic given the seed; ``epochs=0`` freezes the random init.
    """
    features = as_matrix(features, "features")
    n = features.shape[1]
    if n < 1:
        raise ValueError("pretraining dataset must be nonempty")
    labels = _check_labels(labels, config.num_classes, n)
    if epochs < 0:
        raise ValueError(f"epochs must be nonnegative, got {epochs}")

    rng = np.random.default_rng([seed, 0])
    weights, biases = [], []
    for d_out, d_in in layer_dims(config):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_out, d_in)))
        biases.append(np.zeros((d_out, 1)))

    opt = AdamWConfig(lr=lr, weight_decay=weight_decay)
    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, d_ws, d_bs = _full_loss_and_grad(weights, biases, features[:, idx], labels[idx])
            t += 1
            for k in range(len(weights)):
                weights[k], m_w[k], v_w[k] = _adamw_update(weights[k], d_ws[k], m_w[k], v_w[k], t, opt)
                biases[k], m_b[k], v_b[k] = _adamw_update(biases[k], d_bs[k], m_b[k], v_b[k], t, opt)
    return [DenseLayer(w, b) for w, b in zip(weights, biases)]


# ---------------------------------------------------------------------------
# checkpoint I/O: a directory of matrix text files plus manifest.json


def save_checkpoint(directory, config: ModelConfig, layers, adapters=None) -> None:
    """Write layers (and optionally adapters) as matrix files plus manifest.json.

    Filenames: ``layer00_W0.txt``, ``layer00_b0.txt`` and, when adapters are
    present, ``layer00_A.txt``, ``layer00_B.txt``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "input_dim": config.input_dim,
        "num_classes": config.num_classes,
        "hidden_dims": list(config.hidden_dims),
        "rank": config.rank,
        "layers": [{"d_out": l.w0.shape[0], "d_in": l.w0.shape[1]} for l in layers],
        "has_adapters": adapters is not None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    for k, layer in enumerate(layers):
        save_matrix(directory / f"layer{k:02d}_W0.txt", layer.w0)
        save_matrix(directory / f"layer{k:02d}_b0.txt", layer.b0)
    if adapters is not None:
        for k, adapter in enumerate(adapters):
            save_matrix(directory / f"layer{k:02d}_A.txt", adapter.a)
            save_matrix(directory / f"layer{k:02d}_B.txt", adapter.b)


def load_checkpoint(directory):
    """Read a checkpoint directory; returns (config, layers, adapters_or_None)."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid manifest: {exc}", path=manifest_path) from exc
    try:
        config = ModelConfig(
            input_dim=manifest["input_dim"],
            num_classes=manifest["num_classes"],
            hidden_dims=tuple(manifest["hidden_dims"]),
            rank=manifest["rank"],
        )
        layer_shapes = [(entry["d_out"], entry["d_in"]) for entry in manifest["layers"]]
        has_adapters = manifest["has_adapters"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"manifest missing field: {exc}", path=manifest_path) from exc
    layers = []
    for k, (d_out, d_in) in enumerate(layer_shapes):
        w0 = load_matrix(directory / f"layer{k:02d}_W0.txt")
        b0 = load_matrix(directory / f"layer{k:02d}_b0.txt")
        if w0.shape != (d_out, d_in):
            raise ParseError(
                f"layer {k} weight shape {w0.shape} does not match manifest {(d_out, d_in)}",
                path=directory,
            )
        layers.append(DenseLayer(w0, b0))
    adapters = None
    if has_adapters:
        adapters = [
            LoRAAdapter(load_matrix(directory / f"layer{k:02d}_A.txt"),
                        load_matrix(directory / f"layer{k:02d}_B.txt"))
            for k in range(len(layers))
        ]
    return config, layers, adapters
