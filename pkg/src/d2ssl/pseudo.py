"""Pseudo-label storage and the joint loss over predictions and pseudo-labels.

Pseudo-labels are softmax images of unconstrained per-sample logit
vectors. Labeled samples carry a frozen, scaled one-hot logit vector;
unlabeled samples carry an optimizable one updated by plain gradient
steps with their own step size (no momentum, no weight decay).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, FrozenUpdateError
from .numerics import TINY, entropy, kl_divergence, log_softmax, softmax

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"D2PL"
SNAPSHOT_VERSION = 1

CLASSIFICATION_LOSSES = ("forward_kl", "reverse_kl", "squared_l2")


@dataclass
class D2Config:
    alpha: float = 0.1
    beta: float = 0.03
    lam: float = 4000.0        # step size for pseudo-logit updates
    init_scale: float = 10.0   # one-hot scaling K for labeled samples
    classification_loss: str = "forward_kl"
    # Whether labeled samples contribute the full loss (including the
    # entropy term) during joint training, or only the matching term.
    labeled_full_loss: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be positive")
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")
        if self.classification_loss not in CLASSIFICATION_LOSSES:
            raise ConfigurationError(
                f"unknown classification loss {self.classification_loss!r}"
            )
        if self.alpha <= self.beta:
            # Deliberately a warning: the failure mode itself is studied.
            log.warning(
                "alpha=%.4g <= beta=%.4g: exponent 1-beta/alpha is not positive, "
                "pseudo-labels and predictions will be inconsistent",
                self.alpha, self.beta,
            )


@dataclass
class LossBreakdown:
    l_c: float
    l_e: float
    total: float
    alpha: float
    beta: float


@dataclass
class PseudoLabelStore:
    """Per-sample pseudo-logits with a frozen flag per row."""
    logits: np.ndarray  # (n_samples, N)
    frozen: np.ndarray  # (n_samples,) bool
    n_classes: int
    init_scale: float

    @property
    def n_samples(self) -> int:
        return self.logits.shape[0]

    def probs(self, ids=None) -> np.ndarray:
        rows = self.logits if ids is None else self.logits[ids]
        return softmax(rows)

    def log_probs(self, ids=None) -> np.ndarray:
        rows = self.logits if ids is None else self.logits[ids]
        return log_softmax(rows)

    def copy(self) -> "PseudoLabelStore":
        return PseudoLabelStore(
            self.logits.copy(), self.frozen.copy(), self.n_classes, self.init_scale
        )


def init_pseudo_labels(dataset, params, cfg: D2Config) -> PseudoLabelStore:
    """Labeled rows get frozen K*one_hot; unlabeled rows get the current
    head logits; test rows get zeros (never used in training)."""
    from .model import forward  # local import to avoid cycle at module load

    n = params.n_classes
    if dataset.n_classes != n:
        raise ConfigurationError(
            f"dataset has {dataset.n_classes} classes, head outputs {n}"
        )
    logits = np.zeros((dataset.n_samples, n))
    frozen = np.zeros(dataset.n_samples, dtype=bool)
    lab = dataset.labeled_indices
    if lab.size:
        logits[lab, dataset.labeled_targets] = cfg.init_scale
        frozen[lab] = True
    unl = dataset.unlabeled_indices
    if unl.size:
        logits[unl] = forward(params, dataset.features[unl]).logits
    return PseudoLabelStore(logits, frozen, n, cfg.init_scale)


def d2_loss(p_hat_log: np.ndarray, p_tilde_log: np.ndarray, cfg: D2Config):
    """Per-sample loss alpha*L_c + beta*L_e from log-probabilities.

    Returns a LossBreakdown for 1-D inputs, or arrays (l_c, l_e, total)
    for batched 2-D inputs.
    """
    p_hat_log = np.asarray(p_hat_log, dtype=np.float64)
    p_tilde_log = np.asarray(p_tilde_log, dtype=np.float64)
    if p_hat_log.shape[-1] != p_tilde_log.shape[-1]:
        raise DimensionError("log-probability length mismatch")
    p_hat = np.exp(p_hat_log)
    if cfg.classification_loss == "forward_kl":
        l_c = kl_divergence(p_hat_log, p_tilde_log)
    elif cfg.classification_loss == "reverse_kl":
        l_c = kl_divergence(p_tilde_log, p_hat_log)
    else:  # squared_l2
        l_c = np.sum((np.exp(p_tilde_log) - p_hat) ** 2, axis=-1)
    l_e = entropy(p_hat, log_p=p_hat_log)
    total = cfg.alpha * l_c + cfg.beta * l_e
    if p_hat_log.ndim == 1:
        return LossBreakdown(float(l_c), float(l_e), float(total), cfg.alpha, cfg.beta)
    return l_c, l_e, total


def grad_wrt_network_logits(
    p_hat: np.ndarray,
    p_hat_log: np.ndarray,
    p_tilde_log: np.ndarray,
    cfg: D2Config,
) -> np.ndarray:
    """Gradient of the total loss with respect to the network logits.

    Closed forms chained through the softmax; entries sum to zero in
    every variant (softmax gauge). Works on 1-D or batched 2-D inputs.
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    p_hat_log = np.asarray(p_hat_log, dtype=np.float64)
    p_tilde_log = np.asarray(p_tilde_log, dtype=np.float64)
    if p_hat.shape[-1] != p_tilde_log.shape[-1]:
        raise DimensionError("length mismatch between prediction and pseudo-label")
    a, b = cfg.alpha, cfg.beta
    if cfg.classification_loss == "forward_kl":
        # d/dy_n [ sum_j p_j ((a-b) log p_j - a log q_j) ] = p_n (g_n - L)
        g = (a - b) * p_hat_log - a * p_tilde_log
        loss = np.sum(p_hat * g, axis=-1, keepdims=True)
        return p_hat * (g - loss)
    p_tilde = np.exp(p_tilde_log)
    ent = entropy(p_hat, log_p=p_hat_log)[..., None]
    # Entropy part: -p_n (log p_n + H)
    grad_e = -p_hat * (p_hat_log + ent)
    if cfg.classification_loss == "reverse_kl":
        # L_c depends on p_hat only through -sum_j q_j log p_j.
        grad_c = p_hat - p_tilde
    else:  # squared_l2
        dl_dp = -2.0 * (p_tilde - p_hat)
        inner = np.sum(p_hat * dl_dp, axis=-1, keepdims=True)
        grad_c = p_hat * (dl_dp - inner)
    return a * grad_c + b * grad_e


def grad_wrt_pseudo_logits(
    p_hat: np.ndarray, p_tilde: np.ndarray, cfg: D2Config
) -> np.ndarray:
    """Gradient of the total loss with respect to the pseudo-logits.

    The entropy term does not involve the pseudo-label, so only the
    matching term contributes. Entries sum to zero in all variants.
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    p_tilde = np.asarray(p_tilde, dtype=np.float64)
    if p_hat.shape[-1] != p_tilde.shape[-1]:
        raise DimensionError("length mismatch between prediction and pseudo-label")
    a = cfg.alpha
    if cfg.classification_loss == "forward_kl":
        return a * (p_tilde - p_hat)
    if cfg.classification_loss == "reverse_kl":
        log_ratio = np.log(np.maximum(p_tilde, TINY)) - np.log(np.maximum(p_hat, TINY))
        inner = np.sum(p_tilde * log_ratio, axis=-1, keepdims=True)
        return a * p_tilde * (log_ratio - inner)
    if cfg.classification_loss == "squared_l2":
        diff = p_tilde - p_hat
        inner = np.sum(p_tilde * diff, axis=-1, keepdims=True)
        return 2.0 * a * p_tilde * (diff - inner)
    raise ConfigurationError(f"unknown classification loss {cfg.classification_loss!r}")


def d2_update_pseudo(
    store: PseudoLabelStore, sample_id: int, p_hat: np.ndarray, cfg: D2Config
) -> np.ndarray:
    """One plain gradient step on a single sample's pseudo-logits."""
    if store.frozen[sample_id]:
        raise FrozenUpdateError(f"sample {sample_id} is frozen")
    p_tilde = softmax(store.logits[sample_id])
    grad = grad_wrt_pseudo_logits(p_hat, p_tilde, cfg)
    store.logits[sample_id] -= cfg.lam * grad
    return store.logits[sample_id]


def d2_update_pseudo_batch(
    store: PseudoLabelStore, ids: np.ndarray, p_hat: np.ndarray, cfg: D2Config
) -> None:
    """Gradient step for several unfrozen samples at once."""
    ids = np.asarray(ids)
    if np.any(store.frozen[ids]):
        raise FrozenUpdateError("batch contains frozen samples")
    p_tilde = softmax(store.logits[ids])
    grad = grad_wrt_pseudo_logits(p_hat, p_tilde, cfg)
    store.logits[ids] -= cfg.lam * grad


def repredict(store: PseudoLabelStore, params, dataset) -> PseudoLabelStore:
    """Overwrite every unfrozen row with the current head logits."""
    from .model import forward

    unl = np.flatnonzero(~store.frozen)
    active = np.intersect1d(unl, dataset.unlabeled_indices)
    if active.size:
        store.logits[active] = forward(params, dataset.features[active]).logits
    return store


def convergence_residual(
    p_hat_log: np.ndarray, p_tilde_log: np.ndarray, loss_total, cfg: D2Config
):
    """Residual (alpha-beta)*log p_hat_n - alpha*log p_tilde_n - L at the
    arg-max class n of the prediction (ties to the lowest index)."""
    p_hat_log = np.asarray(p_hat_log, dtype=np.float64)
    p_tilde_log = np.asarray(p_tilde_log, dtype=np.float64)
    n = np.argmax(p_hat_log, axis=-1)  # argmax returns the first maximum
    a, b = cfg.alpha, cfg.beta
    if p_hat_log.ndim == 1:
        total = loss_total.total if isinstance(loss_total, LossBreakdown) else float(loss_total)
        return float((a - b) * p_hat_log[n] - a * p_tilde_log[n] - total)
    rows = np.arange(p_hat_log.shape[0])
    total = np.asarray(loss_total, dtype=np.float64)
    return (a - b) * p_hat_log[rows, n] - a * p_tilde_log[rows, n] - total


def save_snapshot(store: PseudoLabelStore, path) -> None:
    """Binary snapshot: magic, version, N, count; then per sample a
    64-bit id, a frozen byte, and N little-endian float64 logits."""
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<III", SNAPSHOT_VERSION, store.n_classes, store.n_samples))
        for i in range(store.n_samples):
            fh.write(struct.pack("<qB", i, int(store.frozen[i])))
            fh.write(np.ascontiguousarray(store.logits[i], dtype="<f8").tobytes())


def load_snapshot(path) -> PseudoLabelStore:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise FormatError(f"bad snapshot magic {magic!r}")
        header = fh.read(12)
        if len(header) < 12:
            raise FormatError("truncated snapshot header")
        version, n_classes, count = struct.unpack("<III", header)
        if version != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported snapshot version {version}")
        logits = np.zeros((count, n_classes))
        frozen = np.zeros(count, dtype=bool)
        for _ in range(count):
            rec = fh.read(9)
            if len(rec) < 9:
                raise FormatError("truncated snapshot record")
            sid, flag = struct.unpack("<qB", rec)
            if not 0 <= sid < count:
                raise FormatError(f"sample id {sid} out of range")
            buf = fh.read(8 * n_classes)
            if len(buf) < 8 * n_classes:
                raise FormatError("truncated snapshot logits")
            logits[sid] = np.frombuffer(buf, dtype="<f8")
            frozen[sid] = bool(flag)
        return PseudoLabelStore(logits, frozen, n_classes, init_scale=0.0)
