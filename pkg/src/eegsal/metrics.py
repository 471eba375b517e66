"""Saliency evaluation metrics and report assembly."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

EPS = 1e-7

# published reference rows, kept verbatim for side-by-side display
REFERENCE_ROWS = (
    {"modality": "EEG", "approach": "Our method (1)", "auc": 0.697, "nss": 1.9869, "cc": 0.383},
    {"modality": "EEG", "approach": "Our method (2)", "auc": 0.574, "nss": 1.6891, "cc": 0.251},
    {"modality": "Images", "approach": "UNISAL", "auc": 0.877, "nss": 2.3689, "cc": 0.7851},
    {"modality": "Images", "approach": "SalGAN", "auc": 0.8498, "nss": 1.8620, "cc": 0.6740},
    {"modality": "Images", "approach": "SSR", "auc": 0.7064, "nss": 0.9116, "cc": 0.2999},
)
METRIC_NAMES = ("auc", "nss", "cc", "bce")


def auc_judd(pred, fixations) -> float:
    """ROC area with thresholds at the predicted values of fixated pixels.

    True positives are counted over fixated pixels, false positives over all
    remaining pixels; the curve is closed with (0, 0) and (1, 1) and
    integrated with the trapezoid rule.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    fix = np.asarray(fixations, dtype=bool).ravel()
    n_fix = int(fix.sum())
    n_other = fix.size - n_fix
    if n_fix == 0 or n_other == 0:
        raise ValueError("need at least one fixated and one non-fixated pixel")
    if np.ptp(pred) == 0:
        return 0.5
    thresholds = np.sort(pred[fix])[::-1]
    all_sorted = np.sort(pred)
    fix_sorted = np.sort(pred[fix])
    above_all = pred.size - np.searchsorted(all_sorted, thresholds, side="left")
    above_fix = n_fix - np.searchsorted(fix_sorted, thresholds, side="left")
    tp = np.concatenate([[0.0], above_fix / n_fix, [1.0]])
    fp = np.concatenate([[0.0], (above_all - above_fix) / n_other, [1.0]])
    return float(np.sum(np.diff(fp) * (tp[1:] + tp[:-1]) / 2.0))


def nss(pred, fixations, flags: list | None = None) -> float:
    """Mean z-scored prediction at fixated pixels (population std)."""
    pred = np.asarray(pred, dtype=np.float64)
    fix = np.asarray(fixations, dtype=bool)
    if not fix.any():
        raise ValueError("fixation set is empty")
    std = pred.std()
    if std == 0:
        if flags is not None:
            flags.append("nss:constant-prediction")
        return 0.0
    return float(((pred - pred.mean()) / std)[fix].mean())


def cc(pred, gt, flags: list | None = None) -> float:
    """Pearson correlation over all pixels."""
    a = np.asarray(pred, dtype=np.float64).ravel()
    b = np.asarray(gt, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom == 0:
        if flags is not None:
            flags.append("cc:constant-map")
        return 0.0
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def bce_metric(pred, gt) -> float:
    p = np.clip(np.asarray(pred, dtype=np.float64), EPS, 1 - EPS)
    t = np.asarray(gt, dtype=np.float64)
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


def score_map(pred, gt, fixations) -> dict:
    flags: list = []
    row = {
        "auc": auc_judd(pred, fixations),
        "nss": nss(pred, fixations, flags),
        "cc": cc(pred, gt, flags),
        "bce": bce_metric(pred, gt),
    }
    if flags:
        row["flags"] = flags
    return row


@dataclass
class MetricsReport:
    per_trial: list = field(default_factory=list)
    means: dict = field(default_factory=dict)
    fold: int | None = None
    config_fingerprint: str = ""
    created: float = field(default_factory=time.time)
    label: str = "generator+discriminator"
    references: tuple = REFERENCE_ROWS
    skipped: list = field(default_factory=list)

    @property
    def n_trials(self) -> int:
        return len(self.per_trial)

    @classmethod
    def from_rows(cls, rows, **kw):
        if not rows:
            raise ValueError("cannot build a report from an empty test set")
        means = {m: float(np.mean([r[m] for r in rows])) for m in METRIC_NAMES}
        return cls(per_trial=list(rows), means=means, **kw)

    def to_dict(self):
        d = asdict(self)
        d["references"] = [dict(r) for r in self.references]
        d["n_trials"] = self.n_trials
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("n_trials", None)
        d["references"] = tuple(d.get("references", REFERENCE_ROWS))
        return cls(**d)

    def table(self) -> str:
        """Plain-text comparison against the reference rows."""
        lines = [f"{'Modality':<9} {'Approach':<36} {'AUC':>7} {'NSS':>8} {'CC':>7}"]
        lines.append("-" * len(lines[0]))
        for r in self.references:
            lines.append(f"{r['modality']:<9} {r['approach']:<36} {r['auc']:>7.4g} "
                         f"{r['nss']:>8.5g} {r['cc']:>7.4g}")
        m = self.means
        tag = f"this run ({self.label})"
        lines.append(f"{'EEG':<9} {tag[:36]:<36} {m['auc']:>7.3f} {m['nss']:>8.4f} {m['cc']:>7.3f}")
        lines.append(f"n_trials={self.n_trials}  mean BCE={m['bce']:.4f}")
        if self.skipped:
            lines.append(f"skipped (no fixations): {', '.join(self.skipped)}")
        return "\n".join(lines)


def evaluate(gen, data, norm_stats, seed=0, fold=None, config_fingerprint="",
             label="generator+discriminator") -> MetricsReport:
    """Score a generator on prepared held-out data.

    ``data`` needs ``eeg_images`` (raw), ``zero_mask``, ``saliency``,
    ``fixations`` and ``trial_ids``. Images are normalized with the
    training-split ``norm_stats``; sampling noise is seeded per trial.
    """
    from .models import generate_maps

    if len(data.trial_ids) == 0:
        raise ValueError("cannot evaluate an empty test set")
    images = norm_stats.apply(data.eeg_images, data.zero_mask)
    preds = generate_maps(gen, images, list(data.trial_ids), seed)
    rows, skipped = [], []
    for tid, p, g, f in zip(data.trial_ids, preds, data.saliency, data.fixations):
        if not np.any(f):
            skipped.append(tid)
            continue
        row = score_map(p, g, f)
        row["trial_id"] = tid
        rows.append(row)
    return MetricsReport.from_rows(rows, fold=fold, config_fingerprint=config_fingerprint, label=label,
                                   skipped=skipped)


def aggregate(reports) -> dict:
    """Mean and population std of the per-fold means."""
    if not reports:
        raise ValueError("no fold reports to aggregate")
    out = {}
    for m in METRIC_NAMES:
        vals = np.array([r.means[m] for r in reports])
        out[m] = {"mean": float(vals.mean()), "std": float(vals.std())}
    out["folds"] = [r.fold for r in reports]
    out["references"] = [dict(r) for r in REFERENCE_ROWS]
    return out
