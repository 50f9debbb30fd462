"""Three-stage training pipeline with Nesterov SGD and scheduled
repredictions.

Stage 1 trains the network on labeled data only with cross entropy and a
cosine learning-rate schedule. Stage 2 jointly optimizes the network and
the pseudo-logits in constant-lr segments, optionally overwriting the
pseudo-logits with fresh predictions at segment starts. Stage 3
finetunes on hard arg-max pseudo-labels with cross entropy.

Pseudo-logits are touched only by their own plain gradient step and by
reprediction; the optimizer, momentum, and weight decay never see them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import OOD_CLASS, SplitDataset
from .errors import ConfigurationError, DimensionError, NumericError, ScheduleError
from .model import GradientSet, ModelParams, backward, forward, init_params
from .numerics import entropy, seeded_rng
from .pseudo import (
    D2Config,
    PseudoLabelStore,
    d2_loss,
    d2_update_pseudo_batch,
    grad_wrt_network_logits,
    init_pseudo_labels,
    repredict,
    convergence_residual,
)

METRICS_HEADER = (
    "stage,epoch,lr,loss_total,loss_c,loss_e,acc_labeled,acc_test,acc_pseudo,"
    "mean_H_pseudo,mean_H_pred,t_abs_p50,t_abs_p95,sum_drift_max"
)


@dataclass
class OptimizerState:
    buffers: list[np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: ModelParams, momentum=0.9, weight_decay=0.0):
        return cls(
            buffers=[np.zeros_like(t) for t in params.tensors()],
            momentum=momentum,
            weight_decay=weight_decay,
        )


@dataclass
class Stage2Segment:
    epochs: int
    lr: float
    repredict_at_start: bool


@dataclass
class SchedulePlan:
    stage1_epochs: int = 200
    stage1_lr: float = 0.05
    stage1_horizon: int = 200
    stage2_segments: list[Stage2Segment] = field(default_factory=lambda: [
        Stage2Segment(50, 0.01, False),
        Stage2Segment(50, 0.008, True),
        Stage2Segment(50, 0.006, True),
        Stage2Segment(50, 0.004, True),
    ])
    stage3_epochs: int = 100
    stage3_lr: float = 0.01
    stage3_horizon: int = 100
    batch_labeled: int = 20
    batch_unlabeled: int = 100
    momentum: float = 0.9
    weight_decay: float = 2e-4
    open_world: bool = False
    discard_fraction: float = 0.1

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage3_epochs < 0:
            raise ConfigurationError("epoch counts must be non-negative")
        if any(s.epochs < 0 for s in self.stage2_segments):
            raise ConfigurationError("segment epoch counts must be non-negative")
        if not 0.0 <= self.discard_fraction < 1.0:
            raise ConfigurationError("discard_fraction must be in [0, 1)")


@dataclass
class MetricsRecord:
    stage: str
    epoch: int
    lr: float
    loss_total: float
    loss_c: float
    loss_e: float
    acc_labeled: float
    acc_test: float
    acc_pseudo: float
    mean_h_pseudo: float
    mean_h_pred: float
    t_abs_p50: float
    t_abs_p95: float
    sum_drift_max: float

    def row(self) -> list[str]:
        vals = [
            self.lr, self.loss_total, self.loss_c, self.loss_e,
            self.acc_labeled, self.acc_test, self.acc_pseudo,
            self.mean_h_pseudo, self.mean_h_pred,
            self.t_abs_p50, self.t_abs_p95, self.sum_drift_max,
        ]
        return [self.stage, str(self.epoch)] + [f"{v:.9g}" for v in vals]


def write_metrics(records: list[MetricsRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        w = csv.writer(fh)
        for rec in records:
            w.writerow(rec.row())


def sgd_nesterov_step(
    params: ModelParams, grads: GradientSet, state: OptimizerState, lr: float
) -> None:
    """In-place Nesterov update; weight decay is folded into the gradient."""
    tensors = params.tensors()
    gtensors = grads.tensors()
    if len(tensors) != len(state.buffers):
        raise DimensionError("optimizer state does not match parameters")
    mu = state.momentum
    for t, g, buf in zip(tensors, gtensors, state.buffers):
        if t.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {t.shape}")
        eff = g + state.weight_decay * t
        buf *= mu
        buf += eff
        t -= lr * (eff + mu * buf)


def cosine_lr(t: int, horizon: int, lr0: float) -> float:
    if horizon <= 0:
        raise ScheduleError("cosine horizon must be positive")
    if t < 0 or t > horizon:
        raise ScheduleError(f"step {t} outside horizon [0, {horizon}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / horizon))


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")


def _accuracy(params: ModelParams, dataset: SplitDataset, ids: np.ndarray) -> float:
    valid = ids[dataset.true_classes[ids] != OOD_CLASS]
    if valid.size == 0:
        return float("nan")
    pred = np.argmax(forward(params, dataset.features[valid]).logits, axis=1)
    return float(np.mean(pred == dataset.true_classes[valid]))


def _pseudo_accuracy(store: PseudoLabelStore, dataset: SplitDataset) -> float:
    unl = dataset.unlabeled_indices
    valid = unl[dataset.true_classes[unl] != OOD_CLASS]
    if valid.size == 0:
        return float("nan")
    pred = np.argmax(store.logits[valid], axis=1)
    return float(np.mean(pred == dataset.true_classes[valid]))


def _supervised_epoch(
    params: ModelParams,
    state: OptimizerState,
    features: np.ndarray,
    targets: np.ndarray,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """One epoch of cross-entropy SGD; returns (mean CE, mean entropy)."""
    n = features.shape[0]
    order = rng.permutation(n)
    bs = min(batch_size, n)
    loss_sum = ent_sum = 0.0
    count = 0
    for start in range(0, n - bs + 1, bs):
        ids = order[start:start + bs]
        trace = forward(params, features[ids])
        rows = np.arange(ids.size)
        ce = -trace.log_prediction[rows, targets[ids]]
        dl = trace.prediction.copy()
        dl[rows, targets[ids]] -= 1.0
        grads = backward(params, trace, dl / ids.size)
        sgd_nesterov_step(params, grads, state, lr)
        loss_sum += float(ce.sum())
        ent_sum += float(entropy(trace.prediction, log_p=trace.log_prediction).sum())
        count += ids.size
    if count == 0:
        return float("nan"), float("nan")
    _check_finite(loss_sum, "cross-entropy loss")
    return loss_sum / count, ent_sum / count


def _nan_record(stage: str, epoch: int, lr: float, **overrides) -> MetricsRecord:
    base = dict(
        stage=stage, epoch=epoch, lr=lr,
        loss_total=float("nan"), loss_c=float("nan"), loss_e=float("nan"),
        acc_labeled=float("nan"), acc_test=float("nan"), acc_pseudo=float("nan"),
        mean_h_pseudo=float("nan"), mean_h_pred=float("nan"),
        t_abs_p50=float("nan"), t_abs_p95=float("nan"),
        sum_drift_max=float("nan"),
    )
    base.update(overrides)
    return MetricsRecord(**base)


def stage1_supervised(
    dataset: SplitDataset,
    params: ModelParams,
    plan: SchedulePlan,
    rng: np.random.Generator,
) -> tuple[ModelParams, list[MetricsRecord]]:
    lab = dataset.labeled_indices
    if lab.size == 0:
        raise ConfigurationError("stage 1 requires at least one labeled sample")
    feats = dataset.features[lab]
    targets = dataset.true_classes[lab]
    state = OptimizerState.for_params(params, plan.momentum, plan.weight_decay)
    records = []
    for epoch in range(plan.stage1_epochs):
        lr = cosine_lr(epoch, plan.stage1_horizon, plan.stage1_lr)
        ce, h_pred = _supervised_epoch(
            params, state, feats, targets, plan.batch_labeled, lr, rng
        )
        records.append(_nan_record(
            "stage1", epoch, lr,
            loss_total=ce, loss_c=ce, loss_e=h_pred,
            acc_labeled=_accuracy(params, dataset, lab),
            acc_test=_accuracy(params, dataset, dataset.test_indices),
            mean_h_pred=h_pred,
        ))
    return params, records


def open_world_filter(
    store: PseudoLabelStore, dataset: SplitDataset, discard_fraction: float
) -> np.ndarray:
    """Active unlabeled indices after discarding the highest-entropy
    fraction of the pool (ties discarded at the lowest sample id)."""
    if not 0.0 <= discard_fraction < 1.0:
        raise ConfigurationError("discard_fraction must be in [0, 1)")
    unl = dataset.unlabeled_indices
    if discard_fraction == 0.0 or unl.size == 0:
        return unl.copy()
    ent = entropy(store.probs(unl))
    n_drop = math.ceil(discard_fraction * unl.size)
    # Sort by descending entropy, then ascending id; the first n_drop go.
    order = np.lexsort((unl, -ent))
    keep = np.sort(unl[order[n_drop:]])
    return keep


def _stage2_epoch_metrics(
    dataset, params, store, cfg, active_unl, drift_base
) -> dict:
    """Full-pool diagnostics computed once per epoch."""
    out = {}
    if active_unl.size:
        trace = forward(params, dataset.features[active_unl])
        p_tilde_log = store.log_probs(active_unl)
        l_c, l_e, total = d2_loss(trace.log_prediction, p_tilde_log, cfg)
        t = convergence_residual(trace.log_prediction, p_tilde_log, total, cfg)
        out["t_abs_p50"] = float(np.percentile(np.abs(t), 50))
        out["t_abs_p95"] = float(np.percentile(np.abs(t), 95))
        out["mean_h_pred"] = float(
            np.mean(entropy(trace.prediction, log_p=trace.log_prediction))
        )
        out["mean_h_pseudo"] = float(np.mean(entropy(store.probs(active_unl))))
        drift = np.abs(store.logits[active_unl].sum(axis=1) - drift_base[active_unl])
        out["sum_drift_max"] = float(drift.max())
    return out


def stage2_d2(
    dataset: SplitDataset,
    params: ModelParams,
    store: PseudoLabelStore,
    plan: SchedulePlan,
    cfg: D2Config,
    rng: np.random.Generator,
) -> tuple[ModelParams, PseudoLabelStore, list[MetricsRecord]]:
    lab = dataset.labeled_indices
    unl = dataset.unlabeled_indices
    state = OptimizerState.for_params(params, plan.momentum, plan.weight_decay)
    records = []
    epoch_global = 0
    cfg_labeled = cfg if cfg.labeled_full_loss else D2Config(
        alpha=cfg.alpha, beta=0.0, lam=cfg.lam, init_scale=cfg.init_scale,
        classification_loss=cfg.classification_loss,
    )
    for segment in plan.stage2_segments:
        if segment.repredict_at_start:
            repredict(store, params, dataset)
        active_unl = (
            open_world_filter(store, dataset, plan.discard_fraction)
            if plan.open_world else unl
        )
        if plan.batch_unlabeled > active_unl.size and active_unl.size > 0:
            raise ConfigurationError(
                f"unlabeled batch size {plan.batch_unlabeled} exceeds "
                f"active pool {active_unl.size}"
            )
        drift_base = store.logits.sum(axis=1).copy()
        lab_order = rng.permutation(lab) if lab.size else lab
        lab_cursor = 0
        for _ in range(segment.epochs):
            unl_order = rng.permutation(active_unl)
            n_batches = (
                active_unl.size // plan.batch_unlabeled if active_unl.size else 0
            )
            loss_sums = np.zeros(3)
            n_seen = 0
            for b in range(n_batches):
                u_ids = unl_order[b * plan.batch_unlabeled:(b + 1) * plan.batch_unlabeled]
                l_ids = []
                need = plan.batch_labeled if lab.size else 0
                while need > 0:
                    if lab_cursor >= lab_order.size:
                        lab_order = rng.permutation(lab)
                        lab_cursor = 0
                    take = min(need, lab_order.size - lab_cursor)
                    l_ids.append(lab_order[lab_cursor:lab_cursor + take])
                    lab_cursor += take
                    need -= take
                l_ids = np.concatenate(l_ids) if l_ids else np.array([], dtype=np.int64)
                ids = np.concatenate([l_ids, u_ids])
                trace = forward(params, dataset.features[ids])
                p_tilde_log = store.log_probs(ids)
                n_lab = l_ids.size
                dl = np.empty_like(trace.logits)
                if n_lab:
                    dl[:n_lab] = grad_wrt_network_logits(
                        trace.prediction[:n_lab], trace.log_prediction[:n_lab],
                        p_tilde_log[:n_lab], cfg_labeled,
                    )
                dl[n_lab:] = grad_wrt_network_logits(
                    trace.prediction[n_lab:], trace.log_prediction[n_lab:],
                    p_tilde_log[n_lab:], cfg,
                )
                grads = backward(params, trace, dl / ids.size)
                sgd_nesterov_step(params, grads, state, segment.lr)
                if cfg.lam > 0:
                    d2_update_pseudo_batch(
                        store, u_ids, trace.prediction[n_lab:], cfg
                    )
                l_c, l_e, total = d2_loss(trace.log_prediction, p_tilde_log, cfg)
                loss_sums += [l_c.sum(), l_e.sum(), total.sum()]
                n_seen += ids.size
            mean_losses = loss_sums / n_seen if n_seen else np.full(3, np.nan)
            _check_finite(float(mean_losses[2]) if n_seen else 0.0, "stage-2 loss")
            extra = _stage2_epoch_metrics(
                dataset, params, store, cfg, active_unl, drift_base
            )
            records.append(_nan_record(
                "stage2", epoch_global, segment.lr,
                loss_total=float(mean_losses[2]),
                loss_c=float(mean_losses[0]), loss_e=float(mean_losses[1]),
                acc_labeled=_accuracy(params, dataset, lab),
                acc_test=_accuracy(params, dataset, dataset.test_indices),
                acc_pseudo=_pseudo_accuracy(store, dataset),
                **extra,
            ))
            epoch_global += 1
    return params, store, records


def stage3_finetune(
    dataset: SplitDataset,
    params: ModelParams,
    store: PseudoLabelStore,
    plan: SchedulePlan,
    rng: np.random.Generator,
    active_unlabeled: np.ndarray | None = None,
) -> tuple[ModelParams, list[MetricsRecord]]:
    lab = dataset.labeled_indices
    unl = dataset.unlabeled_indices if active_unlabeled is None else active_unlabeled
    ids = np.concatenate([lab, unl])
    targets = np.empty(ids.size, dtype=np.int64)
    targets[:lab.size] = dataset.true_classes[lab]
    targets[lab.size:] = np.argmax(store.logits[unl], axis=1)
    state = OptimizerState.for_params(params, plan.momentum, plan.weight_decay)
    feats = dataset.features[ids]
    batch = plan.batch_labeled + plan.batch_unlabeled
    records = []
    for epoch in range(plan.stage3_epochs):
        lr = cosine_lr(epoch, plan.stage3_horizon, plan.stage3_lr)
        ce, h_pred = _supervised_epoch(params, state, feats, targets, batch, lr, rng)
        records.append(_nan_record(
            "stage3", epoch, lr,
            loss_total=ce, loss_c=ce, loss_e=h_pred,
            acc_labeled=_accuracy(params, dataset, lab),
            acc_test=_accuracy(params, dataset, dataset.test_indices),
            acc_pseudo=_pseudo_accuracy(store, dataset),
            mean_h_pred=h_pred,
            mean_h_pseudo=float(np.mean(entropy(store.probs(unl)))) if unl.size else float("nan"),
        ))
    return params, records


def head_only_d2(
    dataset: SplitDataset,
    params: ModelParams,
    store: PseudoLabelStore,
    cfg: D2Config,
    steps: int,
    lr: float,
) -> tuple[ModelParams, PseudoLabelStore, np.ndarray]:
    """Joint full-batch optimization of the head weights and the
    pseudo-logits with the backbone frozen.

    Plain gradient descent on the head, the usual scaled gradient step on
    the pseudo-logits. Returns the updated params, the store, and the
    per-unlabeled-sample residual after the final step. This is the
    controlled setting in which the per-sample residual is driven to
    zero, so the converged population can be audited for the flatness
    and exponential-link properties.
    """
    lab = dataset.labeled_indices
    unl = dataset.unlabeled_indices
    ids = np.concatenate([lab, unl])
    n_lab = lab.size
    feats = forward(params, dataset.features[ids]).feature
    head = params.head_w.copy()
    cfg_labeled = cfg if cfg.labeled_full_loss else D2Config(
        alpha=cfg.alpha, beta=0.0, lam=cfg.lam, init_scale=cfg.init_scale,
        classification_loss=cfg.classification_loss,
    )
    from .numerics import log_softmax, softmax
    for _ in range(steps):
        logits = feats @ head
        log_p = log_softmax(logits)
        p = softmax(logits)
        p_tilde_log = store.log_probs(ids)
        dl = np.empty_like(logits)
        if n_lab:
            dl[:n_lab] = grad_wrt_network_logits(
                p[:n_lab], log_p[:n_lab], p_tilde_log[:n_lab], cfg_labeled,
            )
        dl[n_lab:] = grad_wrt_network_logits(
            p[n_lab:], log_p[n_lab:], p_tilde_log[n_lab:], cfg,
        )
        head -= lr * (feats.T @ (dl / ids.size))
        if cfg.lam > 0 and unl.size:
            d2_update_pseudo_batch(store, unl, p[n_lab:], cfg)
    out = params.copy()
    out.head_w[...] = head
    logits = feats[n_lab:] @ head
    log_p = log_softmax(logits)
    p_tilde_log = store.log_probs(unl)
    _, _, total = d2_loss(log_p, p_tilde_log, cfg)
    t = convergence_residual(log_p, p_tilde_log, total, cfg)
    _check_finite(float(np.max(np.abs(t))) if t.size else 0.0, "head-only residual")
    return out, store, t


def run_r2d2(
    dataset: SplitDataset,
    layer_sizes: list[int],
    activation: str,
    cfg: D2Config,
    plan: SchedulePlan,
    seed: int,
) -> tuple[ModelParams, PseudoLabelStore, list[MetricsRecord]]:
    """Full pipeline: supervised warm-up, pseudo-label initialization,
    joint segments, hard-label finetune. Deterministic given the seed."""
    rng = seeded_rng(seed)
    params = init_params(layer_sizes, activation, rng)
    params, m1 = stage1_supervised(dataset, params, plan, rng)
    store = init_pseudo_labels(dataset, params, cfg)
    params, store, m2 = stage2_d2(dataset, params, store, plan, cfg, rng)
    active = (
        open_world_filter(store, dataset, plan.discard_fraction)
        if plan.open_world else None
    )
    params, m3 = stage3_finetune(dataset, params, store, plan, rng, active)
    return params, store, m1 + m2 + m3


def run_supervised_baseline(
    dataset: SplitDataset,
    layer_sizes: list[int],
    activation: str,
    plan: SchedulePlan,
    seed: int,
) -> tuple[ModelParams, list[MetricsRecord]]:
    """Stage 1 only: the labeled-data-only reference point."""
    rng = seeded_rng(seed)
    params = init_params(layer_sizes, activation, rng)
    return stage1_supervised(dataset, params, plan, rng)
