"""Prototype-distance open-set classification head.

Each known class ``k`` has a prototype ``mu_k`` and a scale ``sigma_k``; the
score of pixel embedding ``m`` for class ``k`` is ``-|m - mu_k|^2 / (2 sigma_k^2)``.
A single learned constant ``gamma`` is the score of the extra "unknown" class,
and a softmax over the ``C + 1`` scores gives class probabilities.

Labels use ``0..C-1`` for known classes, ``C`` for unknown and ``-1`` for
ignored pixels. Ignored pixels take no part in any loss or gradient.

An optional auxiliary contrastive loss acts on L2-normalised linear
projections of a per-class sample of pixel embeddings; same-label pairs are
positives. For an anchor ``i`` and positive ``p`` the term is

    -log( exp(s_ip) / (exp(s_ip) + sum_{n in neg(i)} exp(s_in)) ),

with ``s = z_i . z_j / temperature``, averaged over the positives of each
anchor and then over anchors.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .prototypes import ClassMask, FeatureMap, PoolAccumulator, read_tensor, write_tensor

log = logging.getLogger(__name__)

IGNORE = -1


@dataclass
class EmbeddingMap:
    """Pixel embeddings ``(..., E)`` with integer labels of shape ``(...)``."""

    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, np.float64)
        self.labels = np.asarray(self.labels, np.int64)
        if self.embeddings.shape[:-1] != self.labels.shape:
            raise ValueError(
                f"embeddings {self.embeddings.shape} do not match labels {self.labels.shape}"
            )
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings contain non-finite values")
        if self.labels.size and self.labels.min() < IGNORE:
            raise ValueError(f"labels below {IGNORE} are not allowed")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[-1]

    def flat(self):
        return self.embeddings.reshape(-1, self.dim), self.labels.reshape(-1)


@dataclass
class OpenSetParams:
    mu: np.ndarray
    log_sigma: np.ndarray
    gamma: float = 0.0
    projection: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, np.float64))
        self.log_sigma = np.atleast_1d(np.asarray(self.log_sigma, np.float64))
        self.gamma = float(self.gamma)
        if self.projection is not None:
            self.projection = np.atleast_2d(np.asarray(self.projection, np.float64))
        if self.log_sigma.shape != (self.mu.shape[0],):
            raise ValueError("need one log_sigma per class prototype")

    @property
    def num_classes(self) -> int:
        return self.mu.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def copy(self) -> "OpenSetParams":
        return OpenSetParams(
            self.mu.copy(), self.log_sigma.copy(), self.gamma,
            None if self.projection is None else self.projection.copy(),
        )

    def arrays(self) -> dict:
        out = {"mu": self.mu, "log_sigma": self.log_sigma, "gamma": np.array([self.gamma])}
        if self.projection is not None:
            out["projection"] = self.projection
        return out


@dataclass
class LossBreakdown:
    l_seg: float
    l_cl: float
    lam: float

    @property
    def total(self) -> float:
        return self.l_seg + self.lam * self.l_cl


@dataclass
class Gradients:
    mu: np.ndarray
    log_sigma: np.ndarray
    gamma: float
    projection: Optional[np.ndarray]
    embeddings: np.ndarray


# -- forward ---------------------------------------------------------------------


def class_distances(m: np.ndarray, p: OpenSetParams) -> np.ndarray:
    """Scores ``(..., C+1)``: scaled negative squared distances, then ``gamma``."""
    m = np.asarray(m, np.float64)
    if m.shape[-1] != p.mu.shape[1]:
        raise ValueError(f"embedding dim {m.shape[-1]} != prototype dim {p.mu.shape[1]}")
    diff = m[..., None, :] - p.mu
    sq = np.einsum("...ke,...ke->...k", diff, diff)
    d = -sq / (2.0 * np.exp(2.0 * p.log_sigma))
    gamma = np.full(d.shape[:-1] + (1,), p.gamma)
    return np.concatenate([d, gamma], axis=-1)


def _log_softmax(d: np.ndarray) -> np.ndarray:
    top = d.max(axis=-1, keepdims=True)
    return d - top - np.log(np.exp(d - top).sum(axis=-1, keepdims=True))


def predict_probs(m: np.ndarray, p: OpenSetParams) -> np.ndarray:
    return np.exp(_log_softmax(class_distances(m, p)))


def predict_labels(batch, p: OpenSetParams) -> np.ndarray:
    m = batch.embeddings if isinstance(batch, EmbeddingMap) else np.asarray(batch)
    return np.argmax(class_distances(m, p), axis=-1)


def predict_unknown_mask(batch, p: OpenSetParams) -> np.ndarray:
    """True where the unknown score ``gamma`` wins the argmax."""
    return predict_labels(batch, p) == p.num_classes


# -- losses ------------------------------------------------------------------------


def _seg_terms(batch: EmbeddingMap, p: OpenSetParams):
    m, y = batch.flat()
    keep = y != IGNORE
    if not keep.any():
        raise ValueError("every pixel is ignored; the segmentation loss is undefined")
    if y.max() > p.num_classes:
        raise ValueError(f"label {y.max()} exceeds unknown label {p.num_classes}")
    return m[keep], y[keep], np.flatnonzero(keep)


def seg_loss(batch: EmbeddingMap, p: OpenSetParams) -> float:
    """Mean cross-entropy over the non-ignored pixels."""
    m, y, _ = _seg_terms(batch, p)
    logp = _log_softmax(class_distances(m, p))
    return float(-logp[np.arange(y.size), y].mean())


def sample_pixels(labels: np.ndarray, per_class: Optional[int], rng=None) -> np.ndarray:
    """Flat indices of at most ``per_class`` labelled pixels from each label."""
    y = np.asarray(labels).reshape(-1)
    out = []
    for c in np.unique(y[y != IGNORE]):
        idx = np.flatnonzero(y == c)
        if per_class is not None and idx.size > per_class:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(rng.choice(idx, per_class, replace=False))
        out.append(idx)
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def _contrastive(m, y, w, temperature, want_grad):
    """Loss and (optionally) gradients w.r.t. ``w`` and ``m`` on a sample."""
    if np.unique(y).size < 2:
        raise ValueError("the contrastive loss needs at least 2 labelled classes in the sample")
    u = m @ w.T
    r = np.linalg.norm(u, axis=1)
    if np.any(r == 0):
        raise ValueError("a projected embedding is zero; cannot normalise")
    z = u / r[:, None]
    c = 1.0 / temperature
    s = (z @ z.T) * c
    same = y[:, None] == y[None, :]
    eye = np.eye(y.size, dtype=bool)
    pos = same & ~eye
    neg = ~same
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        raise ValueError("no anchor has a positive pair in the sample")

    e = np.exp(s - c)
    neg_sum = (e * neg).sum(axis=1)
    denom = e + neg_sum[:, None]
    weight = np.where(anchors, 1.0 / np.maximum(n_pos, 1), 0.0) / anchors.sum()
    terms = -(s - c) + np.log(denom)
    loss = float((weight[:, None] * np.where(pos, terms, 0.0)).sum())
    if not want_grad:
        return loss, None, None

    g_pos = np.where(pos, weight[:, None] * (e / denom - 1.0), 0.0)
    ratio = (weight * np.where(pos, 1.0 / denom, 0.0).sum(axis=1))
    g_neg = np.where(neg, e * ratio[:, None], 0.0)
    gs = (g_pos + g_neg) * c
    dz = (gs + gs.T) @ z
    du = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / r[:, None]
    return loss, du.T @ m, du @ w


def contrastive_loss(batch: EmbeddingMap, projection: np.ndarray, temperature: float = 0.1,
                     indices: Optional[np.ndarray] = None) -> float:
    """Supervised contrastive loss on the pixels at ``indices`` (default: all labelled)."""
    m, y = batch.flat()
    if indices is None:
        indices = np.flatnonzero(y != IGNORE)
    loss, _, _ = _contrastive(m[indices], y[indices], np.asarray(projection, float), temperature, False)
    return loss


def loss_and_gradients(
    batch: EmbeddingMap,
    p: OpenSetParams,
    lam: float = 0.0,
    temperature: float = 0.1,
    cl_indices: Optional[np.ndarray] = None,
):
    """Total loss ``l_seg + lam * l_cl`` and its analytic gradients.

    Returns ``(LossBreakdown, Gradients)``. The contrastive term is skipped
    when ``lam == 0`` or the params carry no projection.
    """
    m_all, y_all = batch.flat()
    m, y, keep = _seg_terms(batch, p)
    n = y.size
    C = p.num_classes
    d = class_distances(m, p)
    logp = _log_softmax(d)
    l_seg = float(-logp[np.arange(n), y].mean())

    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    s2 = np.exp(2.0 * p.log_sigma)
    diff = m[:, None, :] - p.mu  # (n, C, E)
    gk = g[:, :C]
    grad_mu = np.einsum("nk,nke->ke", gk, diff) / s2[:, None]
    grad_ls = (gk * (-2.0 * d[:, :C])).sum(axis=0)
    grad_gamma = float(g[:, C].sum())
    grad_m = np.zeros_like(m_all)
    grad_m[keep] = -np.einsum("nk,nke->ne", gk / s2, diff)

    l_cl = 0.0
    grad_w = None if p.projection is None else np.zeros_like(p.projection)
    if lam != 0.0 and p.projection is not None:
        idx = np.flatnonzero(y_all != IGNORE) if cl_indices is None else np.asarray(cl_indices)
        l_cl, gw, gm = _contrastive(m_all[idx], y_all[idx], p.projection, temperature, True)
        grad_w = lam * gw
        np.add.at(grad_m, idx, lam * gm)

    shape = batch.embeddings.shape
    return (
        LossBreakdown(l_seg, l_cl, lam),
        Gradients(grad_mu, grad_ls, grad_gamma, grad_w, grad_m.reshape(shape)),
    )


def gradients(batch, p, lam=0.0, temperature=0.1, cl_indices=None) -> Gradients:
    return loss_and_gradients(batch, p, lam, temperature, cl_indices)[1]


# -- training ------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 500
    milestones: Sequence[int] = (300, 400)
    lr_decay: float = 0.1
    lam: float = 0.1
    temperature: float = 0.1
    samples_per_class: Optional[int] = 64
    projection_dim: int = 8
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**d)
        cfg.milestones = tuple(int(x) for x in cfg.milestones)
        return cfg

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    def lr_at(self, step: int) -> float:
        return self.lr * self.lr_decay ** sum(1 for s in self.milestones if step >= s)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: OpenSetParams
    losses: List[LossBreakdown] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)


def init_params(batches: Sequence[EmbeddingMap], num_classes: int, projection_dim: int = 0,
                seed: int = 0) -> OpenSetParams:
    """Prototypes from masked average pooling; ``log_sigma = 0``; ``gamma = 0``.

    Classes missing from the first batch are pooled from the later ones.
    """
    acc = PoolAccumulator()
    for b in batches:
        m, y = b.flat()
        acc.add(FeatureMap(m[None]), ClassMask(y[None]), classes=range(num_classes))
        if all(k in acc.counts for k in range(num_classes)):
            break
    missing = [k for k in range(num_classes) if k not in acc.counts]
    if missing:
        raise ValueError(f"known classes {missing} have no labelled pixels")
    mu = np.stack([acc.prototype(k).vector for k in range(num_classes)])
    proj = None
    if projection_dim:
        rng = np.random.default_rng(seed)
        proj = rng.normal(size=(projection_dim, mu.shape[1])) / math.sqrt(mu.shape[1])
    return OpenSetParams(mu, np.zeros(num_classes), 0.0, proj)


def train(
    batches: Sequence[EmbeddingMap],
    config: TrainConfig,
    params: Optional[OpenSetParams] = None,
    num_classes: Optional[int] = None,
    callback: Optional[Callable[[int, LossBreakdown, OpenSetParams], None]] = None,
) -> TrainResult:
    """SGD with momentum, weight decay and a step learning-rate schedule.

    Step ``t`` uses ``batches[t % len(batches)]``. The update per parameter is
    ``v = momentum * v + (grad + weight_decay * w); w -= lr_t * v``.
    """
    if not batches:
        raise ValueError("no training batches")
    rng = np.random.default_rng(config.seed)
    if params is None:
        if num_classes is None:
            raise ValueError("num_classes is required when params are not given")
        proj_dim = config.projection_dim if config.lam else 0
        params = init_params(batches, num_classes, proj_dim, config.seed)
    params = params.copy()
    use_cl = config.lam != 0 and params.projection is not None
    velocity = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    result = TrainResult(params)

    for step in range(config.steps):
        batch = batches[step % len(batches)]
        idx = None
        lam = config.lam if use_cl else 0.0
        if use_cl:
            idx = sample_pixels(batch.labels, config.samples_per_class, rng)
            if np.unique(batch.labels.reshape(-1)[idx]).size < 2:
                lam = 0.0
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            loss, grad = loss_and_gradients(batch, params, lam, config.temperature, idx)
        if not math.isfinite(loss.total):
            raise TrainingDiverged(
                f"non-finite loss at step {step} (l_seg={loss.l_seg}, l_cl={loss.l_cl}); "
                f"lr={config.lr_at(step)}, gamma={params.gamma}, "
                f"sigma range=[{params.sigma.min():.3g}, {params.sigma.max():.3g}]"
            )
        lr = config.lr_at(step)
        grads = {"mu": grad.mu, "log_sigma": grad.log_sigma, "gamma": np.array([grad.gamma])}
        if params.projection is not None:
            grads["projection"] = grad.projection if lam else np.zeros_like(params.projection)
        current = params.arrays()
        for k, w in current.items():
            gk = grads[k] + config.weight_decay * w
            velocity[k] = config.momentum * velocity[k] + gk
            current[k] = w - lr * velocity[k]
        params = OpenSetParams(
            current["mu"], current["log_sigma"], float(current["gamma"][0]), current.get("projection")
        )
        result.losses.append(replace(loss, lam=lam))
        result.lrs.append(lr)
        if callback is not None:
            callback(step, loss, params)
    result.params = params
    log.debug("trained %d steps, final loss %.6g", config.steps, result.losses[-1].total)
    return result


# -- checkpoints ------------------------------------------------------------------------


def save_checkpoint(directory, p: OpenSetParams) -> None:
    """One float32 tensor file per parameter inside ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in p.arrays().items():
        write_tensor(out / f"{name}.vct", arr)


def load_checkpoint(directory) -> OpenSetParams:
    d = Path(directory)
    proj = d / "projection.vct"
    return OpenSetParams(
        read_tensor(d / "mu.vct").astype(np.float64),
        read_tensor(d / "log_sigma.vct").astype(np.float64),
        float(read_tensor(d / "gamma.vct")[0]),
        read_tensor(proj).astype(np.float64) if proj.exists() else None,
    )
