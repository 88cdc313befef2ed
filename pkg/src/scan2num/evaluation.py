"""Scoring metrics, bootstrap inference and the evaluation report."""
import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from scan2num.errors import DataError
from scan2num.kernels import rank_rows

COPD_RATIO = 0.7
LAA_THRESHOLD_HU = -950.0


# ------------------------------------------------------------ correlation

def _pearson_rows(a, b):
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    num = (a * b).sum(axis=1)
    den = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    out[den == 0] = np.nan
    return np.clip(out, -1.0, 1.0)


def spearman_rows(x, y):
    """Spearman correlation of each row pair; NaN where a row is constant."""
    return _pearson_rows(rank_rows(x), rank_rows(y))


def spearman(x, y):
    """Rank correlation with average ranks for ties.

    Returns NaN when either input is constant (the statistic is undefined).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D sequences of equal length")
    if x.size < 3:
        raise ValueError("spearman needs at least 3 pairs")
    return float(spearman_rows(x[None], y[None])[0])


# -------------------------------------------------------------- bootstrap

def _auc_rows(scores, labels):
    return np.array([_auc_or_nan(s, l) for s, l in zip(scores, labels)])


def _auc_or_nan(s, l):
    l = l.astype(bool)
    if l.all() or not l.any():
        return math.nan
    return roc_auc(s, l).auc


# statistics with a vectorized (rows of resamples) implementation
_BATCHED = {}


def _statistic_rows(statistic, xs, ys):
    fast = _BATCHED.get(statistic)
    if fast is not None:
        return fast(xs, ys)
    return np.array([statistic(a, b) for a, b in zip(xs, ys)], dtype=np.float64)


def _bootstrap_draws(n, resamples, rng, evaluate, chunk=2000):
    """Collect ``resamples`` non-NaN statistics, redrawing degenerate resamples.

    ``evaluate(idx)`` maps an ``(m, n)`` index array to ``m`` statistics (or
    an ``(m, k)`` array).  At most ``10 * resamples`` draws are made.
    """
    kept, drawn, have = [], 0, 0
    cap = 10 * resamples
    while have < resamples:
        need = min(resamples - have, chunk)
        if drawn + need > cap:
            raise RuntimeError(f"bootstrap: more than {cap} draws needed to get {resamples} "
                               "non-degenerate resamples")
        idx = rng.integers(0, n, size=(need, n))
        drawn += need
        vals = np.asarray(evaluate(idx))
        ok = ~np.isnan(vals) if vals.ndim == 1 else ~np.isnan(vals).any(axis=1)
        kept.append(vals[ok])
        have += int(ok.sum())
    return np.concatenate(kept)[:resamples]


def bootstrap_distribution(x, y, statistic=None, resamples=10_000, rng=None):
    statistic = statistic or spearman
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("bootstrap needs paired data")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    return _bootstrap_draws(x.size, resamples, rng, lambda idx: _statistic_rows(statistic, x[idx], y[idx]))


def bootstrap_ci(x, y, statistic=None, resamples=10_000, rng=None, level=0.95):
    """Percentile bootstrap interval of ``statistic(x, y)`` over paired resamples.

    Resamples where the statistic is undefined (NaN) are redrawn.  Quantiles
    use linear interpolation between order statistics.
    """
    stats = bootstrap_distribution(x, y, statistic, resamples, rng)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def bootstrap_compare(x, y1, y2, resamples=10_000, rng=None, statistic=None):
    """Fraction of shared-index resamples with ``stat(x, y1) > stat(x, y2)``."""
    statistic = statistic or spearman
    x, y1, y2 = (np.asarray(v, dtype=np.float64) for v in (x, y1, y2))
    if not x.shape == y1.shape == y2.shape:
        raise ValueError("bootstrap_compare needs three paired vectors")
    rng = rng if rng is not None else np.random.default_rng(0)

    def both(idx):
        xs = x[idx]
        return np.stack([_statistic_rows(statistic, xs, y1[idx]),
                         _statistic_rows(statistic, xs, y2[idx])], axis=1)

    pairs = _bootstrap_draws(x.size, resamples, rng, both)
    return float(np.mean(pairs[:, 0] > pairs[:, 1]))


# -------------------------------------------------------- discretization

def round_and_clamp(pred, lo, hi):
    """Round half away from zero, then clamp to ``[lo, hi]``."""
    if lo > hi:
        raise ValueError("lo must be <= hi")
    r = math.copysign(math.floor(abs(pred) + 0.5), pred)
    return int(min(hi, max(lo, r)))


def copd_diagnose(fev1_fvc):
    return fev1_fvc < COPD_RATIO


def gold_stage(fev1_fvc, fev1pct):
    if fev1_fvc >= COPD_RATIO:
        return 0
    if fev1pct >= 80:
        return 1
    if fev1pct >= 50:
        return 2
    if fev1pct >= 30:
        return 3
    return 4


@dataclass
class ConfusionMatrix:
    classes: list
    counts: np.ndarray   # rows = actual, cols = predicted

    @property
    def total(self):
        return int(self.counts.sum())

    def to_dict(self):
        return {"classes": [_plain(c) for c in self.classes], "counts": self.counts.tolist()}


def confusion(actual, predicted, classes):
    classes = list(classes)
    pos = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for a, p in zip(actual, predicted):
        if a not in pos or p not in pos:
            raise ValueError(f"label outside classes {classes}: actual={a!r} predicted={p!r}")
        counts[pos[a], pos[p]] += 1
    return ConfusionMatrix(classes, counts)


def weighted_kappa(a, b, classes):
    """Linearly weighted Cohen's kappa; NaN when chance disagreement is zero."""
    cm = confusion(a, b, classes).counts.astype(np.float64)
    k = len(classes)
    if k < 2:
        return math.nan
    obs = cm / cm.sum()
    exp = np.outer(obs.sum(axis=1), obs.sum(axis=0))
    i, j = np.indices((k, k))
    w = np.abs(i - j) / (k - 1)
    den = (w * exp).sum()
    if den == 0:
        return math.nan
    return float(1.0 - (w * obs).sum() / den)


# -------------------------------------------------------------------- ROC

@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray   # first entry is +inf (nothing called positive)
    auc: float

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_auc(scores, labels):
    """ROC over all distinct thresholds (positive iff score >= threshold).

    The trapezoidal area equals the tie-corrected rank statistic
    (concordant + ties / 2) / (n_pos * n_neg).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative cases")
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(l)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, np.r_[np.inf, s[last]], auc)


def auc_score(scores, labels):
    return roc_auc(scores, labels).auc


_BATCHED[spearman] = spearman_rows
_BATCHED[auc_score] = _auc_rows


# ---------------------------------------------------------- densitometry

def densitometric_score(volume, threshold_hu=LAA_THRESHOLD_HU):
    """Share of lung-mask voxels strictly below ``threshold_hu``."""
    lung = volume.mask != 0
    n = int(lung.sum())
    if n == 0:
        raise DataError("mask is empty")
    return float(np.count_nonzero(volume.voxels[lung] < threshold_hu)) / n


# ----------------------------------------------------------------- report

def _plain(v):
    """JSON-safe copy: numpy scalars unwrapped, NaN and inf become null."""
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v) if math.isfinite(v) else None
    return v


@dataclass
class EvalReport:
    target: str
    ids: list
    targets: np.ndarray
    predictions: np.ndarray
    rho: float
    rho_ci: tuple
    confusion: ConfusionMatrix
    roc: RocCurve = None
    auc_ci: tuple = None
    kappa: float = None
    extra: dict = field(default_factory=dict)

    @property
    def auc(self):
        return None if self.roc is None else self.roc.auc

    def to_dict(self):
        out = {
            "target": self.target,
            "n": len(self.ids),
            "rho": self.rho,
            "rho_ci": list(self.rho_ci),
            "confusion": self.confusion.to_dict(),
            "auc": self.auc,
            "auc_ci": None if self.auc_ci is None else list(self.auc_ci),
            "kappa": self.kappa,
            "cases": [{"id": i, "target": float(t), "prediction": float(p)}
                      for i, t, p in zip(self.ids, self.targets, self.predictions)],
        }
        out.update(self.extra)
        return out

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(_plain(self.to_dict()), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
        with open(os.path.join(out_dir, "predictions.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "target", "prediction"])
            for i, t, p in zip(self.ids, self.targets, self.predictions):
                w.writerow([i, repr(float(t)), repr(float(p))])
        with open(os.path.join(out_dir, "confusion.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["actual\\predicted"] + [str(c) for c in self.confusion.classes])
            for c, row in zip(self.confusion.classes, self.confusion.counts):
                w.writerow([str(c)] + [int(v) for v in row])
        roc_path = os.path.join(out_dir, "roc.csv")
        if self.roc is not None:
            with open(roc_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["threshold", "fpr", "tpr"])
                for t, f, p in zip(self.roc.thresholds, self.roc.fpr, self.roc.tpr):
                    w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def build_report(target, ids, targets, predictions, resamples=10_000, rng=None, ratio=None):
    """Compute every metric for one target from paired targets and predictions.

    ``ratio`` is required for ``target == "fev1pct"``: the ``(actual,
    predicted)`` FEV1/FVC arrays used for the GOLD obstruction gate.
    """
    targets = np.asarray(targets, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if np.isnan(targets).any():
        raise DataError(f"missing {target} labels for some cases")
    rng = rng if rng is not None else np.random.default_rng(0)
    rho = spearman(targets, predictions)
    rho_ci = bootstrap_ci(targets, predictions, spearman, resamples, rng)
    roc = auc_ci = kappa = None
    extra = {}
    if target == "ve":
        a = [round_and_clamp(v, 0, 5) for v in targets]
        p = [round_and_clamp(v, 0, 5) for v in predictions]
        cm = confusion(a, p, range(6))
        kappa = weighted_kappa(a, p, range(6))
    elif target == "fev1_fvc":
        a = [bool(copd_diagnose(v)) for v in targets]
        p = [bool(copd_diagnose(v)) for v in predictions]
        cm = confusion(a, p, [False, True])
        labels = np.array(a)
        if labels.all() or not labels.any():
            raise DataError("COPD ROC needs both diseased and healthy cases")
        roc = roc_auc(-predictions, labels)
        auc_ci = bootstrap_ci(-predictions, labels.astype(np.float64), auc_score, resamples, rng)
        extra["accuracy"] = float(np.trace(cm.counts) / cm.total)
    elif target == "fev1pct":
        if ratio is None:
            raise DataError("GOLD staging needs FEV1/FVC values (actual, predicted)")
        ra, rp = ratio
        a = [gold_stage(r, v) for r, v in zip(ra, targets)]
        p = [gold_stage(r, v) for r, v in zip(rp, predictions)]
        cm = confusion(a, p, range(5))
        kappa = weighted_kappa(a, p, range(5))
    else:
        raise DataError(f"unknown target {target!r}")
    return EvalReport(target, list(ids), targets, predictions, rho, rho_ci, cm, roc, auc_ci, kappa, extra)


def evaluate(entries, net, target, split="test", resamples=10_000, rng=None, ratio_net=None):
    """Predict every case of ``split`` and build its :class:`EvalReport`.

    For ``fev1pct`` the GOLD gate uses the measured FEV1/FVC for both the
    actual and the predicted stage unless ``ratio_net`` (a network trained
    on ``fev1_fvc``) is given, in which case the predicted stage uses its
    output.
    """
    from scan2num.data import split_entries
    from scan2num.inference import predict_cases, prepare_entries

    chosen = split_entries(entries, split)
    if not chosen:
        raise DataError(f"manifest has no cases in split {split!r}")
    cases = prepare_entries(chosen, target)
    preds, _ = predict_cases(net, cases)
    targets = np.array([c.target for c in cases])
    ratio = None
    if target == "fev1pct":
        actual = np.array([e.labels.fev1_fvc for e in chosen], dtype=np.float64)
        if np.isnan(actual).any():
            raise DataError("GOLD staging needs measured fev1_fvc for every case")
        predicted = actual if ratio_net is None else predict_cases(ratio_net, cases)[0]
        ratio = (actual, predicted)
    return build_report(target, [c.case_id for c in cases], targets, preds, resamples, rng, ratio)
