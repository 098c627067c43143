"""Minimal reverse-mode autodiff engine for 3-D convolutional autoencoders.

Supports exactly the layer set the contrastive autoencoder needs: 3-D
convolution and transposed convolution (stride >= 1, cubic kernels,
"same"-style zero padding), dense layers, ReLU/sigmoid, MSE and
closed-form diagonal-Gaussian KL losses, plus a bias-corrected Adam
optimizer. Everything runs on numpy arrays; dtype follows the inputs
(float32 for training, float64 in verification code).

Reductions use numpy's fixed sequential/pairwise order, so repeated
backward passes over an unchanged graph are bitwise identical on one
platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``grad`` is populated by :func:`backward`; it always matches ``data``
    in shape. Constant (non-parameter) inputs can be passed to ops as
    plain arrays and are wrapped on the fly.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data, parents, vjp) -> Tensor:
    """Create a graph node; skips wiring when no parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad or p._vjp is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def backward(loss: Tensor):
    """Populate ``grad`` on every tensor reachable from a scalar loss.

    Gradients are reset at the start, so calling this twice on the same
    graph yields identical results. Accumulation follows a fixed
    (reverse-topological) order.
    """
    if loss.data.size != 1:
        raise ShapeMismatchError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, contrib in zip(node._parents, node._vjp(node.grad)):
            if contrib is None:
                continue
            if not (parent.requires_grad or parent._vjp is not None):
                continue
            if parent.grad is None:
                parent.grad = contrib.copy() if contrib.base is not None else contrib
            else:
                parent.grad = parent.grad + contrib


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: {a.shape} vs {b.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # split by sign to avoid overflow in exp
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero in the clamped region."""
    a = _as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    in_shape = a.data.shape
    return _node(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(in_shape),)
    )


def concat(a, b) -> Tensor:
    """Concatenate along the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeMismatchError(f"concat: {a.shape} vs {b.shape}")
    na = a.data.shape[-1]
    return _node(
        np.concatenate([a.data, b.data], axis=-1),
        (a, b),
        lambda g: (g[..., :na], g[..., na:]),
    )


def tensor_sum(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    dtype = a.data.dtype
    return _node(
        np.asarray(a.data.sum()),
        (a,),
        lambda g: (np.broadcast_to(g.astype(dtype), shape),),
    )


def reparameterize(mu, logvar, noise) -> Tensor:
    """mu + exp(logvar / 2) * noise, differentiable in mu and logvar.

    ``noise`` is a caller-supplied standard-normal draw (a constant), so
    sampling stays deterministic under the caller's seed discipline.
    """
    mu, logvar = _as_tensor(mu), _as_tensor(logvar)
    noise = np.asarray(noise)
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise ShapeMismatchError(
            f"reparameterize: mu {mu.shape}, logvar {logvar.shape}, noise {noise.shape}"
        )
    return add(mu, mul(exp(scale(logvar, 0.5)), Tensor(noise)))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(prediction, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    prediction, target = _as_tensor(prediction), _as_tensor(target)
    if prediction.shape != target.shape:
        raise ShapeMismatchError(
            f"mse_loss: {prediction.shape} vs {target.shape}"
        )
    diff = prediction.data - target.data
    n = diff.size
    value = np.asarray((diff * diff).mean())

    def vjp(g):
        gd = g * (2.0 / n) * diff
        return gd, -gd

    return _node(value, (prediction, target), vjp)


def kl_diag_gaussian(mu, logvar) -> Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over all elements.

    Closed form -1/2 * sum(1 + logvar - mu^2 - exp(logvar)). On a pair of
    1-D vectors this is the per-distribution KL; on [batch, dim] inputs it
    is the sum over the batch.
    """
    mu, logvar = _as_tensor(mu), _as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeMismatchError(f"kl_diag_gaussian: {mu.shape} vs {logvar.shape}")
    ev = np.exp(logvar.data)
    value = np.asarray(-0.5 * (1.0 + logvar.data - mu.data**2 - ev).sum())

    def vjp(g):
        return g * mu.data, g * (-0.5) * (1.0 - ev)

    return _node(value, (mu, logvar), vjp)


# ---------------------------------------------------------------------------
# dense / convolutional layers
# ---------------------------------------------------------------------------

def dense(x, w, b) -> Tensor:
    """w @ x + b for a single vector, or x @ w.T + b for a batch of rows."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeMismatchError(f"dense: weights {w.shape}, bias {b.shape}")
    n_out, n_in = w.data.shape
    if x.data.shape[-1] != n_in or b.data.shape[0] != n_out:
        raise ShapeMismatchError(
            f"dense: input {x.shape} vs weights {w.shape} / bias {b.shape}"
        )
    y = x.data @ w.data.T + b.data
    x_needs = x.requires_grad or x._vjp is not None

    def vjp(g):
        gx = g @ w.data if x_needs else None
        if x.data.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            g2 = g.reshape(-1, n_out)
            gw = g2.T @ x.data.reshape(-1, n_in)
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return _node(y, (x, w, b), vjp)


def _conv_axis_geometry(size_in: int, kernel: int, stride: int):
    size_out = -(-size_in // stride)
    pad_total = max((size_out - 1) * stride + kernel - size_in, 0)
    pad_before = (pad_total + 1) // 2  # left-biased when odd
    return size_out, pad_before, pad_total - pad_before


def _im2col(xp: np.ndarray, k: int, s: int, out_spatial) -> np.ndarray:
    """[B, C, *padded] -> [B, C*k^3, n_out] patch matrix (copy)."""
    bsz, ch = xp.shape[:2]
    do, ho, wo = out_spatial
    cols = np.empty((bsz, ch, k, k, k, do, ho, wo), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                cols[:, :, a, b, c] = xp[
                    :, :,
                    a : a + (do - 1) * s + 1 : s,
                    b : b + (ho - 1) * s + 1 : s,
                    c : c + (wo - 1) * s + 1 : s,
                ]
    return cols.reshape(bsz, ch * k**3, do * ho * wo)


def _col2im(gcols: np.ndarray, k: int, s: int, padded_spatial, out_spatial) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back onto the grid."""
    bsz = gcols.shape[0]
    do, ho, wo = out_spatial
    ch = gcols.shape[1] // k**3
    g = gcols.reshape(bsz, ch, k, k, k, do, ho, wo)
    gxp = np.zeros((bsz, ch) + tuple(padded_spatial), dtype=gcols.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                gxp[
                    :, :,
                    a : a + (do - 1) * s + 1 : s,
                    b : b + (ho - 1) * s + 1 : s,
                    c : c + (wo - 1) * s + 1 : s,
                ] += g[:, :, a, b, c]
    return gxp


def conv3d(x, w, b, stride: int) -> Tensor:
    """Strided 3-D convolution with ceil(n/stride) "same" zero padding.

    ``x`` is [C_in, D, H, W] or [B, C_in, D, H, W]; ``w`` is
    [C_out, C_in, k, k, k]. Output spatial sides are ceil(side/stride).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    single = x.data.ndim == 4
    xb = x.data[None] if single else x.data
    if xb.ndim != 5 or w.data.ndim != 5:
        raise ShapeMismatchError(f"conv3d: input {x.shape}, weights {w.shape}")
    c_out, c_in, k = w.data.shape[0], w.data.shape[1], w.data.shape[2]
    if w.data.shape[2:] != (k, k, k):
        raise ShapeMismatchError(f"conv3d: kernel must be cubic, got {w.shape}")
    if xb.shape[1] != c_in:
        raise ShapeMismatchError(
            f"conv3d: input has {xb.shape[1]} channels, weights expect {c_in}"
        )
    if b.data.shape != (c_out,):
        raise ShapeMismatchError(f"conv3d: bias {b.shape} vs {c_out} filters")
    spatial = xb.shape[2:]
    if any(k > n for n in spatial):
        raise ShapeMismatchError(f"conv3d: kernel {k} exceeds input spatial {spatial}")
    geo = [_conv_axis_geometry(n, k, stride) for n in spatial]
    out_spatial = tuple(g[0] for g in geo)
    pads = [(g[1], g[2]) for g in geo]
    xp = np.pad(xb, [(0, 0), (0, 0)] + pads)
    cols = _im2col(xp, k, stride, out_spatial)
    wmat = w.data.reshape(c_out, c_in * k**3)
    y = np.matmul(wmat, cols) + b.data[None, :, None]
    y = y.reshape((xb.shape[0], c_out) + out_spatial)
    if single:
        y = y[0]
    padded_spatial = xp.shape[2:]
    x_needs = x.requires_grad or x._vjp is not None

    def vjp(g):
        gb5 = g[None] if single else g
        g2 = gb5.reshape(gb5.shape[0], c_out, -1)
        gbias = g2.sum(axis=(0, 2))
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.data.shape)
        gx = None
        if x_needs:
            gcols = np.matmul(wmat.T, g2)
            gxp = _col2im(gcols, k, stride, padded_spatial, out_spatial)
            slices = tuple(slice(p0, p0 + n) for (p0, _), n in zip(pads, spatial))
            gx = gxp[(slice(None), slice(None)) + slices]
            gx = gx[0] if single else gx
        return gx, gw, gbias

    return _node(y, (x, w, b), vjp)


def deconv3d(x, w, b, stride: int, target_spatial: int) -> Tensor:
    """Transposed 3-D convolution: the adjoint of :func:`conv3d`.

    ``x`` is [C_in, d, d, d] or batched; ``w`` is [C_in, C_out, k, k, k]
    and ``target_spatial`` must equal stride * d (the output side, made
    explicit because strided transposed convolutions admit two sizes).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    single = x.data.ndim == 4
    xb = x.data[None] if single else x.data
    if xb.ndim != 5 or w.data.ndim != 5:
        raise ShapeMismatchError(f"deconv3d: input {x.shape}, weights {w.shape}")
    c_in, c_out, k = w.data.shape[0], w.data.shape[1], w.data.shape[2]
    if w.data.shape[2:] != (k, k, k):
        raise ShapeMismatchError(f"deconv3d: kernel must be cubic, got {w.shape}")
    if xb.shape[1] != c_in:
        raise ShapeMismatchError(
            f"deconv3d: input has {xb.shape[1]} channels, weights expect {c_in}"
        )
    if b.data.shape != (c_out,):
        raise ShapeMismatchError(f"deconv3d: bias {b.shape} vs {c_out} filters")
    d = xb.shape[2]
    if xb.shape[2:] != (d, d, d):
        raise ShapeMismatchError(f"deconv3d: input spatial must be cubic, got {xb.shape[2:]}")
    if target_spatial != stride * d:
        raise ShapeMismatchError(
            f"deconv3d: target_spatial {target_spatial} != stride {stride} * input side {d}"
        )
    t = target_spatial
    size_out, pad_before, pad_after = _conv_axis_geometry(t, k, stride)
    assert size_out == d
    wmat = w.data.reshape(c_in, c_out * k**3)
    x2 = xb.reshape(xb.shape[0], c_in, d**3)
    cols = np.matmul(wmat.T, x2)
    padded_spatial = (t + pad_before + pad_after,) * 3
    yp = _col2im(cols, k, stride, padded_spatial, (d, d, d))
    sl = slice(pad_before, pad_before + t)
    y = yp[:, :, sl, sl, sl] + b.data[None, :, None, None, None]
    if single:
        y = y[0]

    def vjp(g):
        gb5 = g[None] if single else g
        gbias = gb5.sum(axis=(0, 2, 3, 4))
        gp = np.pad(gb5, [(0, 0), (0, 0)] + [(pad_before, pad_after)] * 3)
        gycols = _im2col(gp, k, stride, (d, d, d))
        gx = np.matmul(wmat, gycols).reshape(xb.shape)
        gw = np.tensordot(x2, gycols, axes=([0, 2], [0, 2])).reshape(w.data.shape)
        return gx[0] if single else gx, gw, gbias

    return _node(y, (x, w, b), vjp)


# spec-facing aliases: the *_forward names describe the op, the short names
# are what model code composes.
conv3d_forward = conv3d
deconv3d_forward = deconv3d
dense_forward = dense


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamHyper:
    """Adam hyperparameters; defaults follow the training recipe."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.beta1 < 1:
            raise ValueError(f"beta1 must be in [0, 1), got {self.beta1}")
        if not 0 <= self.beta2 < 1:
            raise ValueError(f"beta2 must be in [0, 1), got {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class AdamState:
    """First/second moment buffers, one pair per parameter array."""

    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params) -> "AdamState":
        arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls(
            step_count=0,
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
        )


def adam_step(params, grads, state: AdamState, hyper: AdamHyper):
    """One bias-corrected Adam update, in place on the parameter arrays."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError(
            f"adam_step: got {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)}/{len(state.v)} moment buffers"
        )
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        arr = p.data if isinstance(p, Tensor) else p
        g = np.asarray(g)
        if g.shape != arr.shape:
            raise ValueError(
                f"adam_step: param {i} has shape {arr.shape}, grad {g.shape}"
            )
        m = state.m[i]
        v = state.v[i]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        arr -= hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.epsilon)
    return params, state


def glorot_uniform(shape, fan_in: int, fan_out: int, rng, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
