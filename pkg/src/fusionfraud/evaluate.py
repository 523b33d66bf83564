"""Thresholded classification metrics, confusion matrices, and the
ablation runner that trains every requested variant on a shared fold plan.

The positive class is fraud (label 1) throughout. Predictions use the
``p >= threshold`` convention, and any 0/0 metric is defined as 0 with the
report's ``degenerate`` flag set so cross-validation aggregation stays
total.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, InputError, ParameterError
from .model import CANONICAL_ORDER, Variant
from .numkit import child_seed


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    cm: ConfusionMatrix
    threshold: float
    degenerate: bool  # set when any metric hit a 0/0 and was defined as 0

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1,
                "tp": self.cm.tp, "tn": self.cm.tn, "fp": self.cm.fp, "fn": self.cm.fn,
                "threshold": self.threshold, "degenerate": self.degenerate}


METRIC_KEYS = ("accuracy", "precision", "recall", "f1")


def confusion(probs, labels, threshold: float) -> ConfusionMatrix:
    """Tally predictions (p >= threshold -> fraud) against labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise DimensionError(f"{probs.shape[0]} probabilities vs {labels.shape[0]} labels")
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must be inside (0, 1), got {threshold}")
    pred = probs >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def metrics(cm: ConfusionMatrix, threshold: float = 0.5) -> MetricsReport:
    if cm.total == 0:
        raise InputError("cannot compute metrics of an empty confusion matrix")
    degenerate = False

    def ratio(num, den):
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    precision = ratio(cm.tp, cm.tp + cm.fp)
    recall = ratio(cm.tp, cm.tp + cm.fn)
    f1 = ratio(2.0 * precision * recall, precision + recall)
    return MetricsReport(accuracy=(cm.tp + cm.tn) / cm.total, precision=precision,
                         recall=recall, f1=f1, cm=cm, threshold=threshold,
                         degenerate=degenerate)


# ---------------------------------------------------------------------------
# cross-validation and ablation reports
# ---------------------------------------------------------------------------

def aggregate_metrics(reports: list[MetricsReport]):
    """Per-metric mean and population std across folds."""
    mean, std = {}, {}
    for key in METRIC_KEYS:
        values = np.array([getattr(r, key) for r in reports])
        mean[key] = float(values.mean())
        std[key] = float(values.std())
    return mean, std


@dataclass
class AblationRow:
    variant: Variant
    fold_reports: list[MetricsReport]
    mean: dict[str, float]
    std: dict[str, float]


@dataclass
class AblationReport:
    rows: list[AblationRow]  # canonical order
    k: int
    seed: int
    dataset_provenance: str

    def row(self, variant: Variant) -> AblationRow:
        for r in self.rows:
            if r.variant is variant:
                return r
        raise KeyError(variant)

    def to_doc(self) -> dict:
        return {
            "schema": "fusionfraud.ablation/1",
            "k": self.k,
            "seed": self.seed,
            "dataset": self.dataset_provenance,
            "rows": [
                {
                    "variant": row.variant.cli_name,
                    "mean": {k: row.mean[k] for k in METRIC_KEYS},
                    "std": {k: row.std[k] for k in METRIC_KEYS},
                    "folds": [r.as_dict() for r in row.fold_reports],
                }
                for row in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), indent=2) + "\n"

    def to_csv(self) -> str:
        header = ["variant"]
        for key in METRIC_KEYS:
            header += [f"{key}_mean", f"{key}_std"]
        lines = [",".join(header)]
        for row in self.rows:
            cells = [row.variant.cli_name]
            for key in METRIC_KEYS:
                cells += [repr(row.mean[key]), repr(row.std[key])]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def render_text(self) -> str:
        headers = ["Model", "Accuracy (%)", "Precision (%)", "Recall (%)", "F1 (%)"]
        body = []
        for row in self.rows:
            cells = [row.variant.display_name]
            for key in METRIC_KEYS:
                cells.append(f"{100 * row.mean[key]:.1f} ± {100 * row.std[key]:.1f}")
            body.append(cells)
        widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(headers)]
        def fmt(cells):
            return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
        return "\n".join([fmt(headers), rule] + [fmt(r) for r in body]) + "\n"


def run_ablation(dataset, fold_plan, variants: list[Variant], cfg, dims=None,
                 progress=None) -> AblationReport:
    """Cross-validate each requested variant on the shared fold plan.

    Rows come out in canonical report order regardless of request order;
    each variant trains under its own deterministic seed derived from
    ``cfg.seed`` and the variant tag, so adding or removing variants does
    not perturb the others.
    """
    from .train import run_cv  # deferred: train depends on this module

    if not variants:
        raise ParameterError("at least one variant is required")
    ordered = [v for v in CANONICAL_ORDER if v in variants]
    rows = []
    for variant in ordered:
        if progress is not None:
            progress(f"training {variant.cli_name} ({fold_plan.k} folds)")
        variant_seed = child_seed(child_seed(cfg.seed, 2), variant.value)
        cv = run_cv(dataset, fold_plan, variant, replace(cfg, seed=variant_seed), dims=dims)
        rows.append(AblationRow(variant=variant, fold_reports=[f.report for f in cv.folds],
                                mean=cv.mean, std=cv.std))
    return AblationReport(rows=rows, k=fold_plan.k, seed=cfg.seed,
                          dataset_provenance=dataset.provenance)
