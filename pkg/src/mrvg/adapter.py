"""Trainable embedding adapter: residual two-layer transform, contrastive loss
with analytic gradients, Adam, the training loop, and checkpoint I/O.

All math runs in float64 so gradient checks against central finite differences
hold to tight tolerances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import featio
from .featio import Embedding, TemplateBank

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_CHECKPOINT_TENSORS = ("W1", "b1", "W2", "b2")


class AdapterError(ValueError):
    pass


class NoPositivePairError(AdapterError):
    """Batch holds no two embeddings of the same instance."""


class TrainingError(AdapterError):
    pass


@dataclass
class AdapterParams:
    """Residual MLP: out = alpha * (W2 @ relu(W1 @ e + b1) + b2) + (1 - alpha) * e."""

    W1: np.ndarray  # (hidden, dim)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (dim, hidden)
    b2: np.ndarray  # (dim,)
    alpha: float = 0.6

    def __post_init__(self) -> None:
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        hidden, dim = self.W1.shape
        if self.b1.shape != (hidden,) or self.W2.shape != (dim, hidden) or self.b2.shape != (dim,):
            raise AdapterError(
                f"inconsistent shapes: W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}"
            )
        if not (0.0 <= self.alpha <= 1.0):
            raise AdapterError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in _CHECKPOINT_TENSORS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise AdapterError(f"non-finite values in {name}")

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def copy(self) -> "AdapterParams":
        return AdapterParams(
            W1=self.W1.copy(), b1=self.b1.copy(), W2=self.W2.copy(), b2=self.b2.copy(),
            alpha=self.alpha,
        )

    @classmethod
    def identity(cls, dim: int, alpha: float = 0.0) -> "AdapterParams":
        """Parameters whose forward map is exactly the identity blend."""
        return cls(
            W1=np.eye(dim), b1=np.zeros(dim), W2=np.zeros((dim, dim)), b2=np.zeros(dim),
            alpha=alpha,
        )


def init_params(dim: int, hidden: int | None = None, alpha: float = 0.6,
                rng: np.random.Generator | None = None) -> AdapterParams:
    """Fresh parameters. W2 starts at zero so the initial map is a pure
    rescaling of the input, leaving cosine similarities untouched."""
    rng = rng or np.random.default_rng(0)
    hidden = hidden or dim
    return AdapterParams(
        W1=rng.normal(0.0, 1.0 / np.sqrt(dim), size=(hidden, dim)),
        b1=np.zeros(hidden),
        W2=np.zeros((dim, hidden)),
        b2=np.zeros(dim),
        alpha=alpha,
    )


@dataclass
class TrainConfig:
    epochs: int = 640
    lr: float = 1e-3
    batch_size: int = 1024
    temperature: float = 0.05
    seed: int = 0
    alpha: float = 0.6
    hidden: int | None = None

    def __post_init__(self) -> None:
        if self.epochs <= 0:
            raise AdapterError(f"epochs must be > 0, got {self.epochs}")
        if self.lr <= 0:
            raise AdapterError(f"lr must be > 0, got {self.lr}")
        if self.temperature <= 0:
            raise AdapterError(f"temperature must be > 0, got {self.temperature}")
        if self.batch_size < 2:
            raise AdapterError(f"batch_size must be >= 2, got {self.batch_size}")

    def to_dict(self) -> dict:
        return asdict(self)


def forward_array(params: AdapterParams, X: np.ndarray) -> np.ndarray:
    """Apply the adapter to rows of X (B, dim) -> (B, dim)."""
    X = np.asarray(X, dtype=np.float64)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[None, :]
    if X.shape[1] != params.dim:
        raise AdapterError(f"embedding dim {X.shape[1]} != adapter dim {params.dim}")
    H = X @ params.W1.T + params.b1
    R = np.maximum(H, 0.0)
    Z = params.alpha * (R @ params.W2.T + params.b2) + (1.0 - params.alpha) * X
    return Z[0] if squeeze else Z


def adapter_forward(params: AdapterParams, embedding: Embedding) -> Embedding:
    return Embedding(values=forward_array(params, embedding.values), stage="adapted")


def _as_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    vectors, labels = [], []
    for emb, instance_id in batch:
        vec = emb.values if isinstance(emb, Embedding) else np.asarray(emb, dtype=np.float64)
        vectors.append(vec)
        labels.append(int(instance_id))
    if len(vectors) < 2:
        raise AdapterError(f"batch needs >= 2 embeddings, got {len(vectors)}")
    X = np.stack(vectors).astype(np.float64)
    return X, np.asarray(labels, dtype=np.int64)


def _check_positives(labels: np.ndarray) -> np.ndarray:
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    if not same.any():
        raise NoPositivePairError("batch holds no same-instance pair")
    return same


def _loss_core(Z: np.ndarray, labels: np.ndarray, temperature: float):
    """Loss plus dL/dZ for the multi-positive contrastive objective.

    L = -(1/|P|) * sum over ordered same-label pairs (a, p) of
        log( exp(cos(z_a, z_p)/tau) / sum_{k != a} exp(cos(z_a, z_k)/tau) )

    The B x B work buffer is reused in place; batch 1024 stays cheap.
    """
    positives = _check_positives(labels)
    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms == 0.0):
        raise AdapterError("zero-norm embedding in batch")
    Zh = Z / norms[:, None]

    work = Zh @ Zh.T
    work /= temperature
    pos_logit_sum = float(work[positives].sum())
    n_pos = positives.sum(axis=1).astype(np.float64)
    total_pairs = int(round(n_pos.sum()))

    np.fill_diagonal(work, -np.inf)  # an anchor is never its own negative
    row_max = work.max(axis=1)
    work -= row_max[:, None]
    np.exp(work, out=work)
    den = work.sum(axis=1)
    log_den = row_max + np.log(den)
    loss = -(pos_logit_sum - float(n_pos @ log_den)) / total_pairs

    # Turn the buffer into dL/dS for ordered pairs (anchor i, other j).
    work /= den[:, None]  # softmax over k != i
    work *= n_pos[:, None]
    work[positives] -= 1.0
    work /= total_pairs * temperature
    np.fill_diagonal(work, 0.0)

    # S = Zh @ Zh.T with zero diagonal weight, so dL/dZh = (G + G.T) @ Zh;
    # then undo the row normalization z -> z/|z|.
    U_hat = (work + work.T) @ Zh
    proj = np.sum(U_hat * Zh, axis=1, keepdims=True)
    dZ = (U_hat - proj * Zh) / norms[:, None]
    return float(loss), dZ


def infonce_loss(batch, temperature: float) -> float:
    """Contrastive loss over a batch of (embedding, instance_id) pairs."""
    if temperature <= 0:
        raise AdapterError(f"temperature must be > 0, got {temperature}")
    X, labels = _as_batch(batch)
    loss, _ = _loss_core(X, labels, temperature)
    return loss


@dataclass
class AdapterGradients:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    alpha: float


def infonce_backward(params: AdapterParams, batch, temperature: float) -> tuple[float, AdapterGradients]:
    """Loss on adapter outputs plus analytic gradients for every parameter field."""
    E, labels = _as_batch(batch)
    return _backward_arrays(params, E, labels, temperature)


def _backward_arrays(params: AdapterParams, E: np.ndarray, labels: np.ndarray,
                     temperature: float) -> tuple[float, AdapterGradients]:
    if temperature <= 0:
        raise AdapterError(f"temperature must be > 0, got {temperature}")
    if E.shape[1] != params.dim:
        raise AdapterError(f"embedding dim {E.shape[1]} != adapter dim {params.dim}")

    H = E @ params.W1.T + params.b1
    R = np.maximum(H, 0.0)
    M = R @ params.W2.T + params.b2
    Z = params.alpha * M + (1.0 - params.alpha) * E

    loss, dZ = _loss_core(Z, labels, temperature)

    d_alpha = float(np.sum(dZ * (M - E)))
    dM = params.alpha * dZ
    dW2 = dM.T @ R
    db2 = dM.sum(axis=0)
    dR = dM @ params.W2
    dH = dR * (H > 0.0)
    dW1 = dH.T @ E
    db1 = dH.sum(axis=0)
    return loss, AdapterGradients(W1=dW1, b1=db1, W2=dW2, b2=db2, alpha=d_alpha)


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def init(cls, params: AdapterParams) -> "AdamState":
        zeros = {n: np.zeros_like(getattr(params, n)) for n in _CHECKPOINT_TENSORS}
        return cls(step=0, m=zeros, v={n: z.copy() for n, z in zeros.items()})


def adam_step(state: AdamState, params: AdapterParams, grads: AdapterGradients,
              lr: float) -> tuple[AdamState, AdapterParams]:
    """One Adam update over the tensor fields. alpha is a fixed blend knob and
    is never stepped."""
    t = state.step + 1
    new_m, new_v, updated = {}, {}, {}
    for name in _CHECKPOINT_TENSORS:
        g = getattr(grads, name)
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        updated[name] = getattr(params, name) - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name] = m
        new_v[name] = v
    return (
        AdamState(step=t, m=new_m, v=new_v),
        AdapterParams(alpha=params.alpha, **updated),
    )


@dataclass
class TrainResult:
    params: AdapterParams
    loss_history: list[float] = field(default_factory=list)


def _sample_batch(rng: np.random.Generator, labels: np.ndarray, batch_size: int,
                  max_resamples: int = 1000) -> np.ndarray:
    for _ in range(max_resamples):
        idx = rng.integers(0, labels.size, size=batch_size)
        if np.any(np.bincount(labels[idx]) >= 2):
            return idx
    raise TrainingError(f"no batch with a positive pair after {max_resamples} resamples")


def train_adapter(bank: TemplateBank, cfg: TrainConfig) -> TrainResult:
    """Train on all template embeddings, one sampled batch per epoch."""
    if bank.n_instances < 2:
        raise TrainingError(f"bank needs >= 2 instances, got {bank.n_instances}")
    X, labels = bank.all_vectors()
    rng = np.random.default_rng(cfg.seed)
    params = init_params(bank.dim, hidden=cfg.hidden, alpha=cfg.alpha, rng=rng)
    state = AdamState.init(params)

    history: list[float] = []
    for epoch in range(cfg.epochs):
        idx = _sample_batch(rng, labels, cfg.batch_size)
        loss, grads = _backward_arrays(params, X[idx], labels[idx], cfg.temperature)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        state, params = adam_step(state, params, grads, cfg.lr)
        history.append(loss)
    return TrainResult(params=params, loss_history=history)


def save_checkpoint(path, params: AdapterParams, cfg: TrainConfig,
                    loss_history: list[float]) -> Path:
    """Single file: one JSON header line, then the tensors as .mrvgt blobs."""
    header = {
        "version": 1,
        "dim": params.dim,
        "hidden": params.hidden,
        "alpha": params.alpha,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "loss_history": loss_history,
        "tensors": list(_CHECKPOINT_TENSORS),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    for name in _CHECKPOINT_TENSORS:
        tensor = getattr(params, name)
        blob += featio.encode_tensor(tensor.shape, tensor, dtype="float64")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path


def load_checkpoint(path) -> tuple[AdapterParams, dict]:
    blob = Path(path).read_bytes()
    newline = blob.index(b"\n")
    header = json.loads(blob[:newline].decode("utf-8"))
    offset = newline + 1
    tensors = {}
    for name in header["tensors"]:
        shape, data, offset = featio.decode_tensor(blob, offset)
        tensors[name] = data.reshape(shape)
    params = AdapterParams(alpha=header["alpha"], **tensors)
    return params, header
