"""Representational similarity analysis over latent and region geometry.

Pairwise dissimilarity matrices are compared through Kendall tau-b with the
tie rule that a pair tied in both rankings counts toward neither T nor U.
Significance comes from a subject-relabeling permutation test; the null
statistic is evaluated through sign matrices, which keeps the permutation
loop free of re-sorting.
"""

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import cvae

__all__ = [
    "DissimilarityMatrix",
    "KendallResult",
    "CorrelationResult",
    "RsaResult",
    "RsaReport",
    "pairwise_euclidean",
    "kendall_tau_b",
    "latent_dissimilarity_samples",
    "region_dissimilarity",
    "rsa_correlate",
    "rsa_table",
    "rsa_report",
    "significance_tier",
    "rsa_csv",
    "render_rsa_svg",
]

DEFAULT_ALPHA = 0.05
DEFAULT_SAMPLES = 10
DEFAULT_PERMUTATIONS = 10000


@dataclass
class DissimilarityMatrix:
    n: int
    values: np.ndarray
    source: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.n, self.n):
            raise ValueError(f"expected {self.n}x{self.n}, got {v.shape}")
        if not np.allclose(v, v.T, atol=1e-9):
            raise ValueError("dissimilarity matrix must be symmetric")
        if np.any(np.diag(v) != 0.0):
            raise ValueError("diagonal must be zero")
        if np.any(v < 0):
            raise ValueError("entries must be non-negative")
        self.values = v

    def lower_triangle(self):
        rows, cols = np.tril_indices(self.n, -1)
        return self.values[rows, cols]


class KendallResult(NamedTuple):
    tau: Optional[float]
    p: int
    q: int
    t: int
    u: int


class CorrelationResult(NamedTuple):
    mean_tau: Optional[float]
    p_value: Optional[float]


@dataclass
class RsaResult:
    region: str
    channel: str
    mean_tau: float
    p_value: float
    tier: str
    flagged: bool


@dataclass
class RsaReport:
    results: list
    flagged_regions: list        # salient channel significantly positive
    distinguishing_regions: list  # salient positive AND background negative
    alpha: float
    n_samples: int
    permutations: int
    excluded: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# dissimilarity construction
# ---------------------------------------------------------------------------

def pairwise_euclidean(features, source: str = "") -> DissimilarityMatrix:
    """L2 distance between every pair of feature rows."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least two rows")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite feature rows")
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return DissimilarityMatrix(n=x.shape[0], values=d, source=source)


def region_dissimilarity(region_values, source: str = "") -> DissimilarityMatrix:
    """Absolute scalar difference between every pair of region values."""
    a = np.asarray(region_values, dtype=np.float64)
    if a.ndim != 1 or a.shape[0] < 2:
        raise ValueError(f"need a 1-D vector of >= 2 values, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite region values")
    d = np.abs(a[:, None] - a[None, :])
    return DissimilarityMatrix(n=a.shape[0], values=d, source=source)


def latent_dissimilarity_samples(params, positives, which, n_samples: int = DEFAULT_SAMPLES,
                                 seed: int = 0):
    """One pairwise-Euclidean matrix per reparameterized latent draw."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    noise_seeds = np.random.default_rng(seed).integers(2**31, size=n_samples)
    out = []
    for s in range(n_samples):
        feats = cvae.extract_features(params, positives, which, cvae.SAMPLED,
                                      noise_seed=int(noise_seeds[s]))
        out.append(pairwise_euclidean(feats.values, source=f"{which}/sample{s}"))
    return out


# ---------------------------------------------------------------------------
# Kendall tau-b
# ---------------------------------------------------------------------------

def _sign_matrix(v):
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v[:, None] - v[None, :]).astype(np.int8)


def kendall_tau_b(x, y) -> KendallResult:
    """Exact pair counts: concordant, discordant, ties in one ranking only.

    A pair tied in both rankings joins neither T nor U.  All-tied x or y
    zeroes the denominator; tau comes back None then.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need equal-length vectors, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least two observations")
    sx = _sign_matrix(x)
    sy = _sign_matrix(y)
    prod = sx * sy
    # full symmetric matrices double-count each unordered pair
    p = int((prod == 1).sum()) // 2
    q = int((prod == -1).sum()) // 2
    t = int(((sx == 0) & (sy != 0)).sum()) // 2
    u = int(((sx != 0) & (sy == 0)).sum()) // 2
    den = (p + q + t) * (p + q + u)
    tau = (p - q) / np.sqrt(den) if den > 0 else None
    return KendallResult(tau=tau, p=p, q=q, t=t, u=u)


# ---------------------------------------------------------------------------
# permutation test
# ---------------------------------------------------------------------------

def _pair_index(n):
    rows, cols = np.tril_indices(n, -1)
    idx = np.zeros((n, n), dtype=np.int64)
    m = rows.shape[0]
    idx[rows, cols] = np.arange(m)
    idx[cols, rows] = np.arange(m)
    return rows, cols, idx


def rsa_correlate(latent_matrices, region_matrix, permutations: int = DEFAULT_PERMUTATIONS,
                  seed: int = 0) -> CorrelationResult:
    """Mean tau-b of latent vs region dissimilarity, permutation p-value.

    The null relabels subjects: region rows and columns are permuted
    together and the mean tau recomputed.  Under relabeling the tau-b
    denominators never change (tie structure is preserved), so the null
    statistic reduces to an inner product between a fixed weight matrix
    and the permuted region sign matrix.
    """
    if permutations < 1:
        raise ValueError("permutations must be >= 1")
    if not latent_matrices:
        raise ValueError("need at least one latent matrix")
    n = region_matrix.n
    for m in latent_matrices:
        if m.n != n:
            raise ValueError(f"latent matrix is {m.n}x{m.n}, region is {n}x{n}")
    rows, cols, pair_idx = _pair_index(n)
    y = region_matrix.values[rows, cols]
    taus, weights = [], []
    for mat in latent_matrices:
        x = mat.values[rows, cols]
        res = kendall_tau_b(x, y)
        if res.tau is None:
            taus.append(None)
            continue
        den = np.sqrt((res.p + res.q + res.t) * (res.p + res.q + res.u))
        taus.append(res.tau)
        weights.append(_sign_matrix(x).astype(np.float64) / den)
    defined = [t for t in taus if t is not None]
    if not defined:
        warnings.warn("tau undefined for every latent sample (all ties); "
                      "correlation excluded")
        return CorrelationResult(mean_tau=None, p_value=None)
    if len(defined) < len(taus):
        warnings.warn(f"{len(taus) - len(defined)} latent samples had undefined "
                      "tau and were excluded")
    observed = float(np.mean(defined))
    # weight matrix folding the 1/2 double-count, sample mean, denominators
    a = sum(weights) / (2.0 * len(weights))
    sy = _sign_matrix(y)
    rng = np.random.default_rng(seed)
    null = np.empty(permutations, dtype=np.float64)
    for i in range(permutations):
        perm = rng.permutation(n)
        sigma = pair_idx[perm[rows], perm[cols]]
        null[i] = (a * sy[np.ix_(sigma, sigma)]).sum()
    p_value = (1.0 + np.count_nonzero(np.abs(null) >= abs(observed))) / (permutations + 1.0)
    return CorrelationResult(mean_tau=observed, p_value=float(p_value))


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def significance_tier(p: float) -> str:
    if p < 1e-4:
        return "***"
    if p < 1e-3:
        return "**"
    if p < DEFAULT_ALPHA:
        return "*"
    return "n.s."


def _channel_flag(channel, mean_tau, p_value, alpha):
    # salient evidence is a significantly positive tau, background evidence
    # a significantly negative one
    if p_value is None or p_value >= alpha:
        return False
    return mean_tau > 0 if channel == cvae.SALIENT else mean_tau < 0


def rsa_table(latent_samples: dict, region_table, region_names, permutations: int,
              seed: int = 0, alpha: float = DEFAULT_ALPHA):
    """Correlate every (region, channel) pair; rows in region-major order.

    latent_samples maps channel name -> list of DissimilarityMatrix.
    Returns (results, excluded) where excluded lists (region, channel)
    pairs whose tau was undefined for every sample.
    """
    table = np.asarray(region_table, dtype=np.float64)
    if table.shape[1] != len(region_names):
        raise ValueError(f"{table.shape[1]} region columns for "
                         f"{len(region_names)} names")
    results, excluded = [], []
    for r, name in enumerate(region_names):
        region_m = region_dissimilarity(table[:, r], source=name)
        for c, channel in enumerate(sorted(latent_samples)):
            corr = rsa_correlate(latent_samples[channel], region_m,
                                 permutations=permutations,
                                 seed=(seed, r, c))
            if corr.mean_tau is None:
                excluded.append((name, channel))
                continue
            results.append(RsaResult(
                region=name,
                channel=channel,
                mean_tau=corr.mean_tau,
                p_value=corr.p_value,
                tier=significance_tier(corr.p_value),
                flagged=_channel_flag(channel, corr.mean_tau, corr.p_value, alpha),
            ))
    return results, excluded


def rsa_report(params, dataset, seed: int = 0, n_samples: int = DEFAULT_SAMPLES,
               permutations: int = DEFAULT_PERMUTATIONS,
               alpha: float = DEFAULT_ALPHA) -> RsaReport:
    """Latent-vs-region similarity structure for the positive cohort.

    Both latent channels are sampled n_samples times for the positive
    subjects, correlated against each region column, and flagged: a region
    is in flagged_regions when its salient tau is significantly positive,
    and in distinguishing_regions when additionally its background tau is
    significantly negative.
    """
    if dataset.region_table is None:
        raise ValueError("dataset has no region table")
    labels = np.asarray(dataset.labels)
    pos_idx = np.flatnonzero(labels == "positive")
    if pos_idx.size < 2:
        raise ValueError("need at least two positive subjects")
    positives = dataset.subset(pos_idx)
    region_table = np.asarray(dataset.region_table, dtype=np.float64)[pos_idx]
    latent_samples = {
        which: latent_dissimilarity_samples(params, positives, which,
                                            n_samples=n_samples, seed=(seed, ci))
        for ci, which in enumerate((cvae.SALIENT, cvae.BACKGROUND))
    }
    results, excluded = rsa_table(latent_samples, region_table,
                                  dataset.region_names, permutations,
                                  seed=seed, alpha=alpha)
    by_region = {}
    for res in results:
        by_region.setdefault(res.region, {})[res.channel] = res
    flagged, distinguishing = [], []
    for name in dataset.region_names:
        chans = by_region.get(name, {})
        sal = chans.get(cvae.SALIENT)
        bg = chans.get(cvae.BACKGROUND)
        if sal is not None and sal.flagged:
            flagged.append(name)
            if bg is not None and bg.flagged:
                distinguishing.append(name)
    return RsaReport(results=results, flagged_regions=flagged,
                     distinguishing_regions=distinguishing, alpha=alpha,
                     n_samples=n_samples, permutations=permutations,
                     excluded=excluded)


def rsa_csv(report: RsaReport) -> str:
    lines = ["region,channel,mean_tau,p_value,tier,flagged"]
    for r in report.results:
        lines.append(f"{r.region},{r.channel},{repr(r.mean_tau)},"
                     f"{repr(r.p_value)},{r.tier},{str(r.flagged).lower()}")
    return "\n".join(lines) + "\n"


def render_rsa_svg(report: RsaReport, width: int = 900) -> str:
    """Horizontal grouped bar chart of mean tau per region and channel."""
    regions = []
    for r in report.results:
        if r.region not in regions:
            regions.append(r.region)
    by_key = {(r.region, r.channel): r for r in report.results}
    channels = sorted({r.channel for r in report.results})
    row_h, bar_h, left, top = 26, 10, 180, 40
    height = top + row_h * len(regions) + 30
    mid = left + (width - left - 40) / 2.0
    scale = (width - left - 40) / 2.0  # tau in [-1, 1]
    colors = {cvae.SALIENT: "#c0392b", cvae.BACKGROUND: "#2980b9"}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<line x1="{mid}" y1="{top - 10}" x2="{mid}" y2="{height - 25}" '
        'stroke="#888" stroke-width="1"/>',
        f'<text x="{mid}" y="{top - 18}" text-anchor="middle">mean tau</text>',
    ]
    for c, channel in enumerate(channels):
        parts.append(
            f'<rect x="{left + 140 * c}" y="8" width="10" height="10" '
            f'fill="{colors.get(channel, "#555")}"/>'
            f'<text x="{left + 140 * c + 14}" y="17">{channel}</text>'
        )
    for i, region in enumerate(regions):
        y = top + i * row_h
        parts.append(f'<text x="{left - 8}" y="{y + row_h / 2 + 4}" '
                     f'text-anchor="end">{region}</text>')
        for c, channel in enumerate(channels):
            res = by_key.get((region, channel))
            if res is None:
                continue
            w = abs(res.mean_tau) * scale
            x = mid - w if res.mean_tau < 0 else mid
            by = y + 2 + c * (bar_h + 2)
            parts.append(f'<rect x="{x:.2f}" y="{by}" width="{w:.2f}" '
                         f'height="{bar_h}" fill="{colors.get(channel, "#555")}"/>')
            if res.tier != "n.s.":
                tx = mid + w + 4 if res.mean_tau >= 0 else mid - w - 4
                anchor = "start" if res.mean_tau >= 0 else "end"
                parts.append(f'<text x="{tx:.2f}" y="{by + bar_h}" '
                             f'text-anchor="{anchor}">{res.tier}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
