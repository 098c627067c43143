"""Shared oracles for the test suite.

These deliberately re-derive results through independent routes (nested
loops, finite differences, Monte Carlo) rather than reusing library code
paths, so they stay meaningful as checks.
"""

import math

import numpy as np


def rel_err(approx: np.ndarray, exact: np.ndarray) -> float:
    """Max absolute deviation scaled by the largest magnitude involved."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    scale = max(np.abs(approx).max(initial=0.0), np.abs(exact).max(initial=0.0), 1e-8)
    return float(np.abs(approx - exact).max(initial=0.0) / scale)


def finite_diff_grads(loss_fn, arrays, h: float = 1e-4):
    """Central-difference gradients of a scalar function.

    ``loss_fn`` takes no arguments and must read the (float64) arrays in
    ``arrays``, which are perturbed in place one element at a time.
    """
    grads = []
    for arr in arrays:
        assert arr.dtype == np.float64, "finite differences run in wide precision"
        g = np.zeros_like(arr)
        flat, gf = arr.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def naive_conv3d(x, w, b, stride):
    """Direct six-loop convolution with ceil(n/s) same-padding, left-biased."""
    c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
    dims = x.shape[1:]

    def geo(n):
        out = math.ceil(n / stride)
        total = max((out - 1) * stride + k - n, 0)
        return out, (total + 1) // 2

    (do, pd), (ho, ph), (wo, pw) = (geo(n) for n in dims)
    y = np.zeros((c_out, do, ho, wo), dtype=np.float64)
    for co in range(c_out):
        for i in range(do):
            for j in range(ho):
                for l in range(wo):
                    acc = 0.0
                    for ci in range(c_in):
                        for a in range(k):
                            for bb in range(k):
                                for cc in range(k):
                                    ii = i * stride - pd + a
                                    jj = j * stride - ph + bb
                                    ll = l * stride - pw + cc
                                    if 0 <= ii < dims[0] and 0 <= jj < dims[1] and 0 <= ll < dims[2]:
                                        acc += x[ci, ii, jj, ll] * w[co, ci, a, bb, cc]
                    y[co, i, j, l] = acc + b[co]
    return y


def mc_kl_estimate(mu, logvar, n_samples, rng, antithetic=False):
    """Monte-Carlo KL(N(mu, diag(exp(logvar))) || N(0, I)) via reparameterized draws."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    sigma = np.exp(0.5 * logvar)
    if antithetic:
        eps_half = rng.standard_normal((n_samples // 2, mu.size))
        eps = np.concatenate([eps_half, -eps_half])
    else:
        eps = rng.standard_normal((n_samples, mu.size))
    z = mu + sigma * eps
    log_q = -0.5 * (math.log(2 * math.pi) + logvar + eps**2)
    log_p = -0.5 * (math.log(2 * math.pi) + z**2)
    return float((log_q - log_p).sum(axis=1).mean())


def brute_force_kendall(x, y):
    """All-pairs P/Q/T/U counting with explicit Python loops."""
    x = list(x)
    y = list(y)
    p = q = t = u = 0
    for i in range(len(x)):
        for j in range(i + 1, len(x)):
            tie_x = x[i] == x[j]
            tie_y = y[i] == y[j]
            if tie_x and tie_y:
                continue
            if tie_x:
                t += 1
            elif tie_y:
                u += 1
            elif (x[i] > x[j]) == (y[i] > y[j]):
                p += 1
            else:
                q += 1
    denom = math.sqrt((p + q + t) * (p + q + u))
    tau = (p - q) / denom if denom > 0 else None
    return p, q, t, u, tau


def silhouette(coords, labels):
    """Mean silhouette coefficient over all points (Euclidean)."""
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels)
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    uniq = np.unique(labels)
    scores = []
    for i in range(len(coords)):
        mask_own = (labels == labels[i])
        mask_own[i] = False
        if not mask_own.any():
            continue
        a = d[i][mask_own].mean()
        b = min(d[i][labels == c].mean() for c in uniq if c != labels[i])
        scores.append((b - a) / max(a, b))
    return float(np.mean(scores))
