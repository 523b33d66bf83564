"""Optimization stack: AdamW with decoupled weight decay, cosine-annealing
learning rate, minibatch loop with early stopping on validation F1, and the
stratified cross-validation driver.

Seed derivation is frozen so results are identical however the folds are
scheduled: run_cv gives fold i the seed child_seed(child_seed(cfg.seed, 1), i);
within one training run, substream 0 initializes weights, 1 shuffles epochs,
2 feeds the dropout lane pool and 3 picks the early-stopping split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, FoldPlan
from .errors import NumericError, ParameterError, SplitError
from .evaluate import MetricsReport, aggregate_metrics, confusion, metrics
from .model import (
    ModelDims,
    ModelParams,
    Variant,
    batch_backward,
    batch_forward,
    init_params,
)
from .numkit import Rng, RngLanes, bce_loss_vec, child_seed


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 1e-4
    lr_min: float = 0.0
    batch_size: int = 8
    max_epochs: int = 100
    t_max: int | None = None  # cosine period; defaults to max_epochs
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout_p: float = 0.2
    patience: int = 10
    threshold: float = 0.5
    seed: int = 0

    @property
    def t_max_resolved(self) -> int:
        return self.max_epochs if self.t_max is None else self.t_max

    def validate(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ParameterError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr_min > self.lr_max:
            raise ParameterError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.patience < 1:
            raise ParameterError(f"patience must be at least 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ParameterError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError(f"threshold must be inside (0, 1), got {self.threshold}")
        if self.t_max is not None and self.t_max < 1:
            raise ParameterError(f"t_max must be at least 1, got {self.t_max}")


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Half-cosine decay from lr_max at epoch 0 to lr_min at epoch t_max;
    epochs past t_max clamp to lr_min."""
    if epoch < 0:
        raise ParameterError(f"epoch must be non-negative, got {epoch}")
    t_max = cfg.t_max_resolved
    if epoch > t_max:
        return cfg.lr_min
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * epoch / t_max)) / 2.0


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    _buf: dict[str, np.ndarray]  # scratch, one per tensor, to keep steps allocation-free

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamWState":
        named = params.named_tensors()
        return cls(t=0,
                   m={name: np.zeros_like(tensor) for name, tensor in named},
                   v={name: np.zeros_like(tensor) for name, tensor in named},
                   _buf={name: np.empty_like(tensor) for name, tensor in named})


def adamw_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam step, in place.

    Per tensor: m <- b1*m + (1-b1)*g, v <- b2*v + (1-b2)*g^2, then
    theta <- theta - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
                   - lr * weight_decay * theta,
    with the decay applied to weight matrices only (names ending in .W*),
    never to biases. Any non-finite gradient entry aborts before touching
    optimizer state. The update is computed in the algebraically equivalent
    form m*sqrt(bc2)/(bc1*(sqrt(v) + eps*sqrt(bc2))), which avoids temporary
    allocations; it agrees with the literal formula to rounding.
    """
    named = params.named_tensors()
    for name, _ in named:
        if not np.isfinite(grads[name]).all():
            raise NumericError(f"non-finite gradient in {name}; step aborted")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    sqrt_bc2 = math.sqrt(bc2)
    step_scale = lr * sqrt_bc2 / bc1
    eps_hat = cfg.eps * sqrt_bc2
    decay = lr * cfg.weight_decay
    for name, theta in named:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        buf = state._buf[name]
        np.multiply(m, b1, out=m)
        np.multiply(g, 1.0 - b1, out=buf)
        np.add(m, buf, out=m)
        np.multiply(v, b2, out=v)
        np.multiply(g, g, out=buf)
        np.multiply(buf, 1.0 - b2, out=buf)
        np.add(v, buf, out=v)
        np.sqrt(v, out=buf)
        np.add(buf, eps_hat, out=buf)
        np.divide(m, buf, out=buf)
        np.multiply(buf, step_scale, out=buf)
        np.subtract(theta, buf, out=theta)
        if decay != 0.0 and name.rsplit(".", 1)[1].startswith("W"):
            np.multiply(theta, decay, out=buf)
            np.subtract(theta, buf, out=theta)


# ---------------------------------------------------------------------------
# early stopping and history
# ---------------------------------------------------------------------------

@dataclass
class EarlyStopState:
    best_metric: float = -math.inf
    best_epoch: int = 0
    epochs_since_improve: int = 0
    best_checkpoint: ModelParams | None = None

    def update(self, metric: float, epoch: int, params: ModelParams) -> bool:
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_epoch = epoch
            self.epochs_since_improve = 0
            self.best_checkpoint = params.copy()
            return True
        self.epochs_since_improve += 1
        return False


@dataclass
class EpochStats:
    epoch: int  # 1-based
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float
    val_prec: float
    val_rec: float
    val_f1: float


@dataclass
class TrainHistory:
    entries: list[EpochStats] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    CSV_HEADER = "epoch,lr,train_loss,val_loss,val_acc,val_prec,val_rec,val_f1"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for e in self.entries:
            lines.append(",".join(repr(x) for x in
                                  (e.epoch, e.lr, e.train_loss, e.val_loss,
                                   e.val_acc, e.val_prec, e.val_rec, e.val_f1)))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# single training run
# ---------------------------------------------------------------------------

def _stack(records):
    V = np.stack([r.video for r in records])
    A = np.stack([r.audio for r in records])
    y = np.array([r.label for r in records], dtype=np.float64)
    return V, A, y


def train_one(variant: Variant, train_records, val_records, cfg: TrainConfig,
              dims: ModelDims | None = None):
    """Train one model; returns (best_params, TrainHistory).

    Per epoch: seeded shuffle, minibatches of cfg.batch_size (last batch may
    be short), AdamW with the epoch's cosine learning rate; then validation
    F1 drives checkpointing and early stopping.
    """
    cfg.validate()
    if not train_records or not val_records:
        raise ParameterError("train and validation sets must both be non-empty")
    if dims is None:
        dims = ModelDims(dropout_p=cfg.dropout_p)
    else:
        dims = replace(dims, dropout_p=cfg.dropout_p)

    params = init_params(variant, child_seed(cfg.seed, 0), dims)
    shuffle_rng = Rng(cfg.seed).fork(1)
    drop_lanes = RngLanes(child_seed(cfg.seed, 2))
    state = AdamWState.for_params(params)
    stopper = EarlyStopState()
    history = TrainHistory()

    V_tr, A_tr, y_tr = _stack(train_records)
    V_val, A_val, y_val = _stack(val_records)
    n = len(train_records)
    if len(set(int(v) for v in y_val)) < 2:
        history.warnings.append("validation split contains a single class; F1 may degenerate to 0")
    if len(set(int(v) for v in y_tr)) < 2:
        history.warnings.append("training split contains a single class")

    for epoch0 in range(cfg.max_epochs):
        lr = cosine_lr(epoch0, cfg)
        order = list(range(n))
        shuffle_rng.shuffle(order)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            p, cache = batch_forward(params, V_tr[idx], A_tr[idx],
                                     train_mode=True, lanes=drop_lanes)
            loss_sum += float(bce_loss_vec(p, y_tr[idx]).sum())
            grads = batch_backward(params, cache, y_tr[idx])
            adamw_step(params, grads, state, lr, cfg)

        p_val, _ = batch_forward(params, V_val, A_val, train_mode=False)
        val_loss = float(bce_loss_vec(p_val, y_val).mean())
        report = metrics(confusion(p_val, y_val.astype(np.int64), cfg.threshold), cfg.threshold)
        history.entries.append(EpochStats(
            epoch=epoch0 + 1, lr=lr, train_loss=loss_sum / n, val_loss=val_loss,
            val_acc=report.accuracy, val_prec=report.precision,
            val_rec=report.recall, val_f1=report.f1))
        stopper.update(report.f1, epoch0 + 1, params)
        if stopper.epochs_since_improve >= cfg.patience:
            break

    return stopper.best_checkpoint, history


# ---------------------------------------------------------------------------
# cross-validation driver
# ---------------------------------------------------------------------------

VAL_FRACTION = 0.15


@dataclass
class FoldOutcome:
    fold: int
    params: ModelParams
    history: TrainHistory
    report: MetricsReport


@dataclass
class CVReport:
    variant: Variant
    folds: list[FoldOutcome]
    mean: dict[str, float]
    std: dict[str, float]

    def to_doc(self) -> dict:
        return {
            "schema": "fusionfraud.cv/1",
            "variant": self.variant.cli_name,
            "k": len(self.folds),
            "mean": self.mean,
            "std": self.std,
            "folds": [
                {"fold": f.fold, **f.report.as_dict(),
                 "epochs_run": len(f.history.entries),
                 "warnings": f.history.warnings}
                for f in self.folds
            ],
        }


def _early_stop_split(indices, labels, fraction: float, rng: Rng):
    """Stratified validation carve-out: per class, shuffle and take
    max(1, round(fraction * class size))."""
    val, train = [], []
    for label in (0, 1):
        members = [i for i in indices if labels[i] == label]
        if not members:
            raise SplitError(f"training portion lost class {label} entirely")
        rng.shuffle(members)
        n_val = max(1, round(fraction * len(members)))
        if n_val >= len(members):
            raise SplitError(f"class {label} too small to carve a validation split")
        val.extend(members[:n_val])
        train.extend(members[n_val:])
    return sorted(train), sorted(val)


def run_cv(dataset: Dataset, fold_plan: FoldPlan, variant: Variant, cfg: TrainConfig,
           dims: ModelDims | None = None) -> CVReport:
    """Stratified k-fold cross-validation of one variant.

    Fold i trains on the other folds (15% of them carved out, stratified,
    as the early-stopping split) and is evaluated on fold i. Aggregates are
    the unweighted mean and population std of each metric across folds.
    """
    cfg.validate()
    labels = dataset.labels()
    outcomes = []
    for fold in range(fold_plan.k):
        fold_seed = child_seed(child_seed(cfg.seed, 1), fold)
        fold_cfg = replace(cfg, seed=fold_seed)
        train_idx, val_idx = _early_stop_split(
            fold_plan.train_indices(fold).tolist(), labels, VAL_FRACTION,
            Rng(fold_seed).fork(3))
        best, history = train_one(variant,
                                  [dataset.records[i] for i in train_idx],
                                  [dataset.records[i] for i in val_idx],
                                  fold_cfg, dims=dims)
        test_records = [dataset.records[i] for i in fold_plan.test_indices(fold)]
        V, A, y = _stack(test_records)
        probs, _ = batch_forward(best, V, A, train_mode=False)
        report = metrics(confusion(probs, y.astype(np.int64), cfg.threshold), cfg.threshold)
        outcomes.append(FoldOutcome(fold=fold, params=best, history=history, report=report))
    mean, std = aggregate_metrics([o.report for o in outcomes])
    return CVReport(variant=variant, folds=outcomes, mean=mean, std=std)
