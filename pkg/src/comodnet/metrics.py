"""Quantitative analyses: classification statistics and the relative
improvement score, expected calibration error with reliability bins, PCA/LDA
explained-variance spectra, unit informativeness (gradient-times-activation
and d-prime), and gain-informativeness alignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh
from scipy.stats import rankdata


@dataclass
class ClassificationStats:
    precision: float
    recall: float
    f1: float
    accuracy: float
    support: int
    precision_undefined: bool = False

    def metric_triple(self):
        return (self.precision, self.recall, self.f1)


def classification_stats(predictions, labels) -> ClassificationStats:
    """Binary confusion-matrix derivations. Precision with no positive
    predictions is reported as 0 and flagged."""
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if pred.size == 0 or pred.shape != lab.shape:
        raise ValueError(f"bad prediction/label shapes {pred.shape} vs {lab.shape}")
    tp = int(np.sum((pred == 1) & (lab == 1)))
    fp = int(np.sum((pred == 1) & (lab == 0)))
    fn = int(np.sum((pred == 0) & (lab == 1)))
    undefined = (tp + fp) == 0
    precision = 0.0 if undefined else tp / (tp + fp)
    recall = 0.0 if (tp + fn) == 0 else tp / (tp + fn)
    f1 = 0.0 if (precision + recall) == 0 else 2 * precision * recall / (precision + recall)
    accuracy = float(np.mean(pred == lab))
    return ClassificationStats(precision, recall, f1, accuracy, int(pred.size),
                               precision_undefined=undefined)


def multiclass_accuracy(predictions, labels) -> float:
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.size == 0:
        raise ValueError("empty predictions")
    return float(np.mean(pred == lab))


def delta_p(method: ClassificationStats, baseline: ClassificationStats,
            higher_is_better=(True, True, True)) -> float:
    """Mean signed relative difference over (precision, recall, F1), in
    percent; positive means the method improves on the baseline."""
    terms = []
    for m, b, hib in zip(method.metric_triple(), baseline.metric_triple(),
                         higher_is_better):
        if b == 0:
            raise ValueError("baseline metric of 0: relative difference undefined")
        sign = 1.0 if hib else -1.0
        terms.append(sign * (m - b) / b)
    return 100.0 * float(np.mean(terms))


@dataclass
class ReliabilityDiagram:
    bin_edges: np.ndarray      # (B+1,)
    counts: np.ndarray         # (B,)
    mean_confidence: np.ndarray
    accuracy: np.ndarray
    ece: float


def ece(confidences, correct, n_bins: int = 15) -> ReliabilityDiagram:
    """Equal-width-binned expected calibration error over [0,1]."""
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0,1]")
    if n_bins < 1:
        raise ValueError("need at least one bin")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    sum_conf = np.bincount(idx, weights=conf, minlength=n_bins)
    sum_corr = np.bincount(idx, weights=corr, minlength=n_bins)
    with np.errstate(invalid="ignore"):
        mean_conf = np.where(counts > 0, sum_conf / np.maximum(counts, 1), 0.0)
        acc = np.where(counts > 0, sum_corr / np.maximum(counts, 1), 0.0)
    value = float(np.sum(counts / conf.size * np.abs(acc - mean_conf)))
    return ReliabilityDiagram(edges, counts, mean_conf, acc, value)


@dataclass
class SpectrumReport:
    ratios: np.ndarray        # explained-variance ratios, descending
    dims_to_threshold: int    # smallest prefix reaching the threshold
    threshold: float = 0.8
    degenerate: bool = False


def _dims_to(ratios: np.ndarray, threshold: float) -> int:
    cum = np.cumsum(ratios)
    return int(np.searchsorted(cum, threshold - 1e-12) + 1)


def pca_spectrum(activations: np.ndarray, threshold: float = 0.8) -> SpectrumReport:
    """Eigen-spectrum of the sample covariance, as explained-variance ratios."""
    x = np.asarray(activations, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an (N>1, D) activation matrix, got {x.shape}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    eig = np.linalg.eigvalsh(cov)[::-1]
    eig = np.maximum(eig, 0.0)
    total = eig.sum()
    if total == 0.0:
        raise ValueError("rank-0 data: all rows identical")
    ratios = eig / total
    return SpectrumReport(ratios, _dims_to(ratios, threshold), threshold)


def lda_spectrum(activations: np.ndarray, labels, threshold: float = 0.8,
                 reg: float = 1e-4) -> SpectrumReport:
    """Generalized eigenvalues of between- vs within-class scatter.

    The within-class scatter is regularized by lambda*I with
    lambda = reg * trace(Sw)/D so that D > N stays solvable.
    """
    x = np.asarray(activations, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    if np.any(counts < 2):
        raise ValueError("every class needs at least 2 samples")
    d = x.shape[1]
    mean = x.mean(axis=0)
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for c, n_c in zip(classes, counts):
        xc = x[y == c]
        mu = xc.mean(axis=0)
        dev = xc - mu
        sw += dev.T @ dev
        dm = (mu - mean)[:, None]
        sb += n_c * (dm @ dm.T)
    lam = reg * np.trace(sw) / d
    if lam == 0.0:
        lam = reg
    sw_reg = sw + lam * np.eye(d)
    eig = eigh(sb, sw_reg, eigvals_only=True)[::-1]
    eig = np.maximum(eig, 0.0)
    total = eig.sum()
    degenerate = total < 1e-12
    if degenerate:
        ratios = np.zeros_like(eig)
        return SpectrumReport(ratios, len(ratios), threshold, degenerate=True)
    ratios = eig / total
    return SpectrumReport(ratios, _dims_to(ratios, threshold), threshold)


def informativeness_grad(head_weights: np.ndarray, activities: np.ndarray,
                         labels, gains: np.ndarray | None = None) -> np.ndarray:
    """Per-unit gradient-times-activation of the true-class output.

    With a linear readout o = sum_n w_n a_n the gradient is the readout
    weight itself, so the score for unit n is mean_i w[label_i, n] * a_in
    (times the gain when the readout saw gain-scaled activity).
    """
    a = np.asarray(activities, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    if a.shape[0] != lab.shape[0]:
        raise ValueError("activity/label count mismatch")
    w = np.asarray(head_weights, dtype=np.float64)  # (units, classes)
    grad = w.T[lab]  # (N, units): d o_true / d a_n
    if gains is not None:
        grad = grad * np.asarray(gains, dtype=np.float64)
    return (grad * a).mean(axis=0)


def informativeness_dprime(activities: np.ndarray, labels) -> np.ndarray:
    """Per-unit d' = |mu1 - mu0| / sqrt(0.5 (s1^2 + s0^2)).

    Units with zero pooled variance come back as +inf sentinels.
    """
    a = np.asarray(activities, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if not (np.any(y == 0) and np.any(y == 1)):
        raise ValueError("both classes must be present")
    a0, a1 = a[y == 0], a[y == 1]
    num = np.abs(a1.mean(axis=0) - a0.mean(axis=0))
    pooled = np.sqrt(0.5 * (a1.var(axis=0) + a0.var(axis=0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        d = num / pooled
    d[(pooled == 0) & (num == 0)] = 0.0
    d[(pooled == 0) & (num > 0)] = np.inf
    return d


def spearman_rho(a, b) -> float:
    ra, rb = rankdata(a), rankdata(b)
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0:
        return 0.0
    return float((ra * rb).sum() / denom)


def spearman_permutation_pvalue(a, b, n_perm: int = 2000, seed: int = 0,
                                alternative: str = "greater") -> tuple[float, float]:
    """Permutation test for Spearman rank correlation; returns (rho, p)."""
    rng = np.random.default_rng(seed)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    rho = spearman_rho(a, b)
    hits = 0
    for _ in range(n_perm):
        r = spearman_rho(a, rng.permutation(b))
        if alternative == "greater":
            hits += r >= rho
        else:
            hits += abs(r) >= abs(rho)
    return rho, (hits + 1) / (n_perm + 1)


@dataclass
class InformativenessReport:
    bin_edges: np.ndarray       # score quantile edges, (Q+1,)
    bin_mean_gain: np.ndarray   # (Q,)
    bin_counts: np.ndarray
    spearman: float
    spearman_p: float = field(default=float("nan"))


def gain_vs_informativeness(gains: np.ndarray, scores: np.ndarray,
                            n_bins: int = 5, permutation_seed: int | None = None,
                            n_perm: int = 2000) -> InformativenessReport:
    """Bin units by informativeness quantiles; mean normalized gain per bin
    plus the Spearman rank correlation between score and gain."""
    g = np.asarray(gains, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if g.shape != s.shape:
        raise ValueError("gains and scores must align per unit")
    if n_bins > g.size:
        raise ValueError(f"{n_bins} bins for {g.size} units")
    edges = np.quantile(s, np.linspace(0, 1, n_bins + 1))
    idx = np.clip(np.searchsorted(edges[1:-1], s, side="right"), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=g, minlength=n_bins)
    mean_gain = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    if permutation_seed is not None:
        rho, p = spearman_permutation_pvalue(s, g, n_perm=n_perm, seed=permutation_seed)
    else:
        rho, p = spearman_rho(s, g), float("nan")
    return InformativenessReport(edges, mean_gain, counts, rho, p)
