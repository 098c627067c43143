"""Exact t-SNE for projecting feature matrices to 2-D, plus plot artifacts.

O(n^2) affinities and gradients, per-point bandwidths found by bisection,
deterministic principal-component initialization.  Cohort sizes here stay
in the tens, so no tree approximations are needed.
"""

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TsneConfig",
    "TsneError",
    "tsne_embed",
    "silhouette_score",
    "embedding_to_plot",
    "read_embedding_csv",
    "trace_csv",
]

PERPLEXITY_TOL = 1e-5
MAX_BISECTION_STEPS = 64


class TsneError(Exception):
    pass


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = None  # None -> min(30, (n - 1) / 3)
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum_start: float = 0.5
    momentum_late: float = 0.8
    momentum_switch: int = 250
    init: str = "pca"
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.early_exaggeration < 1:
            raise ValueError("early_exaggeration must be >= 1")
        for m in (self.momentum_start, self.momentum_late):
            if not 0 <= m < 1:
                raise ValueError("momentum must lie in [0, 1)")
        if self.init not in ("pca", "random"):
            raise ValueError(f"init must be pca or random, got {self.init!r}")


def _resolve_perplexity(config: TsneConfig, n: int) -> float:
    perp = config.perplexity
    if perp is None:
        perp = min(30.0, (n - 1) / 3.0)
    if not 1.0 < perp < n:
        raise ValueError(f"perplexity must lie in (1, {n}), got {perp}")
    return float(perp)


# ---------------------------------------------------------------------------
# affinities
# ---------------------------------------------------------------------------

def _squared_distances(x):
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def _row_distribution(d2_row, beta):
    logits = -beta * d2_row
    logits -= logits.max()
    w = np.exp(logits)
    p = w / w.sum()
    # Shannon entropy in nats; perplexity = exp(H)
    nz = p > 0
    h = -np.sum(p[nz] * np.log(p[nz]))
    return p, np.exp(h)


def _conditional_probabilities(d2, target_perplexity):
    """Per-row bisection on the precision so each row hits the target."""
    n = d2.shape[0]
    p_cond = np.zeros((n, n))
    mask = ~np.eye(n, dtype=bool)
    for i in range(n):
        row = d2[i][mask[i]]
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(MAX_BISECTION_STEPS):
            p, perp = _row_distribution(row, beta)
            if abs(perp - target_perplexity) < PERPLEXITY_TOL:
                break
            if perp > target_perplexity:
                lo = beta
                beta = beta * 2.0 if np.isinf(hi) else 0.5 * (lo + hi)
            else:
                hi = beta
                beta = 0.5 * (lo + hi)
        else:
            raise TsneError(
                f"perplexity bisection failed to converge for row {i} "
                f"(target {target_perplexity}, reached {perp:.6f})"
            )
        p_cond[i][mask[i]] = p
    return p_cond


def _joint_probabilities(x, target_perplexity):
    p_cond = _conditional_probabilities(_squared_distances(x), target_perplexity)
    p = (p_cond + p_cond.T) / (2.0 * x.shape[0])
    return p


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _power_component(cov, rng, deflate=None, steps=200):
    v = rng.standard_normal(cov.shape[0])
    if deflate is not None:
        v -= deflate * (deflate @ v)
    v /= np.linalg.norm(v)
    for _ in range(steps):
        w = cov @ v
        if deflate is not None:
            w -= deflate * (deflate @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v
        w /= norm
        if np.abs(w @ v) > 1.0 - 1e-12:
            return w
        v = w
    return v


def _initial_coords(x, config: TsneConfig, rng):
    n = x.shape[0]
    if config.init == "random":
        return 1e-4 * rng.standard_normal((n, 2))
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc
    v1 = _power_component(cov, rng)
    v2 = _power_component(cov, rng, deflate=v1)
    y = xc @ np.column_stack([v1, v2])
    scale = y[:, 0].std()
    if scale == 0.0:
        return 1e-4 * rng.standard_normal((n, 2))
    return 1e-4 * y / scale


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def _kl_divergence(p, q):
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def tsne_embed(features, labels=None, config: TsneConfig = TsneConfig()):
    """Project rows to 2-D; returns (coords, kl_trace).

    The KL trace is evaluated against the un-exaggerated affinities at
    every iteration, so the two phases are directly comparable.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 4:
        raise ValueError(f"need a 2-D matrix with >= 4 rows, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    n = x.shape[0]
    if labels is not None and len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} rows")
    perp = _resolve_perplexity(config, n)
    p = _joint_probabilities(x, perp)

    rng = np.random.default_rng(config.seed)
    y = _initial_coords(x, config, rng)
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    trace = np.empty(config.iterations, dtype=np.float64)
    for t in range(config.iterations):
        d2 = _squared_distances(y)
        num = 1.0 / (1.0 + d2)
        np.fill_diagonal(num, 0.0)
        q = num / num.sum()
        q = np.maximum(q, 1e-15)
        p_eff = p * config.early_exaggeration if t < config.exaggeration_iters else p
        coeff = (p_eff - q) * num
        grad = 4.0 * ((np.diag(coeff.sum(axis=1)) - coeff) @ y)
        # per-coordinate gains, raised against the velocity and cut with it
        same_dir = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_dir, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        momentum = (config.momentum_start if t < config.momentum_switch
                    else config.momentum_late)
        velocity = momentum * velocity - config.learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
        trace[t] = _kl_divergence(p, q)
    return y, trace


def silhouette_score(coords, labels) -> float:
    """Mean Euclidean silhouette over all points (requires >= 2 groups)."""
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels)
    if coords.shape[0] != labels.shape[0]:
        raise ValueError("coords and labels length mismatch")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two groups")
    d = np.sqrt(_squared_distances(coords))
    scores = np.zeros(coords.shape[0])
    for i in range(coords.shape[0]):
        same = (labels == labels[i])
        n_same = same.sum()
        if n_same < 2:
            scores[i] = 0.0
            continue
        a = d[i][same].sum() / (n_same - 1)
        b = min(d[i][labels == other].mean() for other in uniq if other != labels[i])
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


# ---------------------------------------------------------------------------
# plot artifacts
# ---------------------------------------------------------------------------

_MARKER_STYLES = [
    ("circle", "#c0392b"),
    ("square", "#2980b9"),
    ("triangle", "#27ae60"),
    ("diamond", "#8e44ad"),
    ("circle", "#f39c12"),
    ("square", "#16a085"),
]


def _marker_svg(shape, cx, cy, r, color):
    if shape == "circle":
        return f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r}" fill="{color}"/>'
    if shape == "square":
        return (f'<rect x="{cx - r:.2f}" y="{cy - r:.2f}" width="{2 * r}" '
                f'height="{2 * r}" fill="{color}"/>')
    if shape == "triangle":
        pts = f"{cx:.2f},{cy - r:.2f} {cx - r:.2f},{cy + r:.2f} {cx + r:.2f},{cy + r:.2f}"
        return f'<polygon points="{pts}" fill="{color}"/>'
    pts = f"{cx:.2f},{cy - r:.2f} {cx + r:.2f},{cy:.2f} {cx:.2f},{cy + r:.2f} {cx - r:.2f},{cy:.2f}"
    return f'<polygon points="{pts}" fill="{color}"/>'


def embedding_to_plot(coords, labels, path, ids=None, channels=None,
                      width: int = 640, height: int = 480):
    """Write the embedding as CSV plus an SVG scatter.

    `path` may name either output; both `<base>.csv` and `<base>.svg` are
    written.  Marker style follows the (label, channel) group.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = coords.shape[0]
    labels = list(labels) if labels is not None else [""] * n
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} points")
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    channels = list(channels) if channels is not None else [""] * n
    if len(ids) != n or len(channels) != n:
        raise ValueError("ids/channels length mismatch")

    base = path
    for ext in (".csv", ".svg"):
        if base.endswith(ext):
            base = base[: -len(ext)]
    csv_path, svg_path = base + ".csv", base + ".svg"

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y", "label", "channel"])
        for i in range(n):
            writer.writerow([ids[i], repr(float(coords[i, 0])),
                             repr(float(coords[i, 1])), labels[i], channels[i]])

    groups = sorted({(labels[i], channels[i]) for i in range(n)})
    style = {g: _MARKER_STYLES[j % len(_MARKER_STYLES)]
             for j, g in enumerate(groups)}
    margin, r = 40, 4
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" font-family="sans-serif" font-size="11">']
    if n:
        lo = coords.min(axis=0)
        hi = coords.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)

        def place(pt):
            sx = margin + (pt[0] - lo[0]) / span[0] * (width - 2 * margin)
            sy = height - margin - (pt[1] - lo[1]) / span[1] * (height - 2 * margin)
            return sx, sy

        for j, g in enumerate(groups):
            shape, color = style[g]
            legend = "/".join(part for part in g if part) or "all"
            parts.append(_marker_svg(shape, 14, 14 + 16 * j, 4, color))
            parts.append(f'<text x="24" y="{18 + 16 * j}">{legend}</text>')
        for i in range(n):
            sx, sy = place(coords[i])
            shape, color = style[(labels[i], channels[i])]
            parts.append(_marker_svg(shape, sx, sy, r, color))
    parts.append("</svg>")
    with open(svg_path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
    return csv_path, svg_path


def read_embedding_csv(path):
    ids, xs, ys, labels, channels = [], [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["id", "x", "y", "label", "channel"]:
            raise ValueError(f"unexpected embedding header {header}")
        for row in reader:
            ids.append(row[0])
            xs.append(float(row[1]))
            ys.append(float(row[2]))
            labels.append(row[3])
            channels.append(row[4])
    coords = np.column_stack([xs, ys]) if ids else np.zeros((0, 2))
    return ids, coords, labels, channels


def trace_csv(trace) -> str:
    lines = ["iteration,kl"]
    for t, kl in enumerate(trace):
        lines.append(f"{t},{repr(float(kl))}")
    return "\n".join(lines) + "\n"
