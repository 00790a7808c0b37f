"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every value on the tape is a real ``float64`` array. Complex tensors carry a
trailing axis of length 2 holding (real, imag); signal-processing primitives
treat axis 0 as time. For a real loss ``L`` the gradient of a complex tensor
``z`` is stored as ``(dL/dRe z, dL/dIm z)``; written as ``g = dL/dRe + j dL/dIm``
a complex-linear map ``y = A z`` back-propagates as ``g_z = A^H g_y``.

The tape is append-only, so recording order is already a topological order and
``backward`` simply walks it in reverse.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Var",
    "Tape",
    "to_complex",
    "from_complex",
    "add",
    "sub",
    "mul",
    "scale",
    "cmul",
    "mask_multiply",
    "exp_j",
    "abs2",
    "rsqrt",
    "sum",
    "mean",
    "matmul",
    "bias_add",
    "elu",
    "softmax",
    "softmax_cross_entropy",
    "gather",
    "reshape",
    "circular_fir",
    "upsample",
    "downsample",
    "fft",
    "ifft",
    "power_normalize",
    "grad_check",
    "clip_global_norm",
    "AdamState",
    "adam_update",
]


def to_complex(a: np.ndarray) -> np.ndarray:
    return a[..., 0] + 1j * a[..., 1]


def from_complex(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    return np.stack([z.real, z.imag], axis=-1).astype(np.float64)


class Var:
    __slots__ = ("value", "grad", "tape", "index", "requires_grad")

    def __init__(self, value, tape: "Tape", index: int, requires_grad: bool):
        self.value = value
        self.grad = None
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


class Tape:
    """Records operations as they execute and replays them backwards."""

    def __init__(self):
        self._backward: list = []   # per node: (parents, fn) or None for leaves
        self._vars: list[Var] = []

    def __len__(self):
        return len(self._vars)

    def _new(self, value, requires_grad, parents=(), fn=None) -> Var:
        v = Var(np.asarray(value, dtype=np.float64), self, len(self._vars), requires_grad)
        self._vars.append(v)
        self._backward.append((parents, fn) if fn is not None else None)
        return v

    def leaf(self, value, requires_grad: bool = True) -> Var:
        return self._new(np.array(value, dtype=np.float64), requires_grad)

    def constant(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def record(self, value, parents: Sequence[Var], fn: Callable) -> Var:
        """Add a node. ``fn(g_out)`` returns one cotangent (or ``None``) per parent."""
        needs = any(p.requires_grad for p in parents)
        return self._new(value, needs, tuple(parents), fn if needs else None)

    def backward(self, loss: Var) -> dict:
        """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every trainable leaf.

        Returns ``{leaf: grad}``.
        """
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        leaves = {}
        for i in range(loss.index, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            entry = self._backward[i]
            if entry is None:
                var = self._vars[i]
                if var.requires_grad:
                    var.grad = g if var.grad is None else var.grad + g
                    leaves[var] = var.grad
                continue
            parents, fn = entry
            for p, gp in zip(parents, fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                if p.index in grads:
                    grads[p.index] = grads[p.index] + gp
                else:
                    grads[p.index] = gp
        return leaves


def _as_var(x, like: Var) -> Var:
    if isinstance(x, Var):
        return x
    return like.tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one argument must be a Var")


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Var:
    t = _tape_of(a, b)
    a = a if isinstance(a, Var) else t.constant(a)
    b = b if isinstance(b, Var) else t.constant(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return t.record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a = a if isinstance(a, Var) else t.constant(a)
    b = b if isinstance(b, Var) else t.constant(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return t.record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a = a if isinstance(a, Var) else t.constant(a)
    b = b if isinstance(b, Var) else t.constant(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return t.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Var, c: float) -> Var:
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def cmul(a: Var, b: Var) -> Var:
    """Complex elementwise product of two (..., 2) tensors."""
    t = _tape_of(a, b)
    a = a if isinstance(a, Var) else t.constant(a)
    b = b if isinstance(b, Var) else t.constant(b)
    za, zb = to_complex(a.value), to_complex(b.value)

    def bw(g):
        gc = to_complex(g)
        return from_complex(gc * np.conj(zb)), from_complex(gc * np.conj(za))

    return t.record(from_complex(za * zb), (a, b), bw)


def mask_multiply(a: Var, mask) -> Var:
    """Multiply a complex tensor by a fixed complex mask (CD transfer, low-pass, ...)."""
    m = np.asarray(mask)
    if m.ndim == 1 and a.value.ndim > 2:
        m = m.reshape(m.shape + (1,) * (a.value.ndim - 2))
    z = to_complex(a.value)
    return a.tape.record(from_complex(z * m), (a,), lambda g: (from_complex(to_complex(g) * np.conj(m)),))


def exp_j(theta: Var) -> Var:
    """Real phase -> unit-modulus complex ``exp(j theta)``."""
    z = np.exp(1j * theta.value)

    def bw(g):
        return (np.real(np.conj(to_complex(g)) * 1j * z),)

    return theta.tape.record(from_complex(z), (theta,), bw)


def abs2(a: Var) -> Var:
    """Squared magnitude of a complex tensor; drops the trailing axis."""
    v = a.value
    return a.tape.record(v[..., 0] ** 2 + v[..., 1] ** 2, (a,), lambda g: (2 * v * g[..., None],))


def rsqrt(a: Var) -> Var:
    out = 1.0 / np.sqrt(a.value)
    return a.tape.record(out, (a,), lambda g: (-0.5 * g * out**3,))


def sum(a: Var) -> Var:  # noqa: A001 - mirrors numpy
    shape = a.shape
    return a.tape.record(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Var) -> Var:
    shape, n = a.shape, a.value.size
    return a.tape.record(np.mean(a.value), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


# -- dense network -----------------------------------------------------------

def matmul(a: Var, b: Var) -> Var:
    t = _tape_of(a, b)
    a = a if isinstance(a, Var) else t.constant(a)
    b = b if isinstance(b, Var) else t.constant(b)
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return t.record(av @ bv, (a, b), bw)


def bias_add(a: Var, b: Var) -> Var:
    """``(N, D) + (D,)``."""
    if a.shape[-1:] != b.shape:
        raise ValueError(f"bias shape {b.shape} does not match {a.shape}")
    return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)))


def elu(a: Var) -> Var:
    x = a.value
    neg = x <= 0
    out = np.where(neg, np.expm1(np.minimum(x, 0)), x)
    return a.tape.record(out, (a,), lambda g: (np.where(neg, g * (out + 1), g),))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Var) -> Var:
    p = _softmax(logits.value)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return logits.tape.record(p, (logits,), bw)


def softmax_cross_entropy(logits: Var, labels) -> Var:
    """Mean over rows of ``-log softmax(logits)[label]`` (nats)."""
    x = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(log_z - shifted[np.arange(n), labels])

    def bw(g):
        d = np.exp(shifted - log_z[:, None])
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return logits.tape.record(loss, (logits,), bw)


def gather(w: Var, idx) -> Var:
    """Row lookup ``w[idx]`` along axis 0; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = w.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return w.tape.record(w.value[idx], (w,), bw)


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


# -- signal processing on (N, 2) ---------------------------------------------

def _kernel(taps: np.ndarray, n: int, center: int) -> np.ndarray:
    k = np.zeros(n, dtype=np.complex128)
    np.add.at(k, (np.arange(taps.shape[0]) - center) % n, taps)
    return k


def circular_fir(x: Var, taps: Var, center: int = 0) -> Var:
    """Circular convolution ``y[n] = sum_k taps[k] x[n - (k - center)]`` along axis 0."""
    t = _tape_of(x, taps)
    x = x if isinstance(x, Var) else t.constant(x)
    taps = taps if isinstance(taps, Var) else t.constant(taps)
    n, n_taps = x.shape[0], taps.shape[0]
    if n_taps > n:
        raise ValueError(f"{n_taps} taps exceed the block length {n}")
    X = np.fft.fft(to_complex(x.value))
    H = np.fft.fft(_kernel(to_complex(taps.value), n, center))
    offsets = (np.arange(n_taps) - center) % n

    def bw(g):
        G = np.fft.fft(to_complex(g))
        gx = from_complex(np.fft.ifft(G * np.conj(H))) if x.requires_grad else None
        gt = None
        if taps.requires_grad:
            # correlation of the cotangent with the input, read at each tap's delay
            corr = np.fft.ifft(G * np.conj(X))
            gt = from_complex(corr[offsets])
        return gx, gt

    return t.record(from_complex(np.fft.ifft(X * H)), (x, taps), bw)


def upsample(x: Var, factor: int) -> Var:
    n = x.shape[0]
    out = np.zeros((n * factor,) + x.shape[1:])
    out[::factor] = x.value
    return x.tape.record(out, (x,), lambda g: (g[::factor].copy(),))


def downsample(x: Var, factor: int, offset: int = 0) -> Var:
    n = x.shape[0]
    if n % factor:
        raise ValueError(f"length {n} not divisible by {factor}")

    def bw(g):
        out = np.zeros((n,) + g.shape[1:])
        out[offset::factor] = g
        return (out,)

    return x.tape.record(x.value[offset::factor].copy(), (x,), bw)


def fft(x: Var) -> Var:
    """Unitary DFT along axis 0; its adjoint is the unitary inverse."""
    y = np.fft.fft(to_complex(x.value), axis=0, norm="ortho")
    return x.tape.record(from_complex(y), (x,), lambda g: (from_complex(np.fft.ifft(to_complex(g), axis=0, norm="ortho")),))


def ifft(x: Var) -> Var:
    y = np.fft.ifft(to_complex(x.value), axis=0, norm="ortho")
    return x.tape.record(from_complex(y), (x,), lambda g: (from_complex(np.fft.fft(to_complex(g), axis=0, norm="ortho")),))


def power_normalize(x: Var, target: float) -> Var:
    """Scale a complex tensor to mean power ``target``.

    The mean power is *not* treated as a constant in the backward pass.
    """
    v = x.value
    n = v.size // 2
    mu = np.sum(v * v) / n
    if mu == 0:
        from .signal import DegenerateSignalError

        raise DegenerateSignalError("cannot normalize an all-zero signal")
    s = np.sqrt(target / mu)

    def bw(g):
        return (s * g - (s / (mu * n)) * np.sum(g * v) * v,)

    return x.tape.record(v * s, (x,), bw)


# -- checking and optimisation ------------------------------------------------

def grad_check(f: Callable[[Tape, Var], Var], x0, eps: float = 1e-4, floor: float = 1e-6):
    """Compare reverse-mode gradients with finite differences.

    ``f(tape, x)`` must build a scalar loss from the leaf ``x``. Differences use
    the fourth-order central stencil with step ``eps * max(|x_i|, rms(x))``.
    The relative error of a coordinate is
    ``|ad - fd| / max(|ad|, |fd|, floor * max|fd|)``.

    Returns ``(max_rel_error, ad_grad, fd_grad)``.
    """
    x0 = np.array(x0, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(x0)
    loss = f(tape, x)
    tape.backward(loss)
    ad = x.grad if x.grad is not None else np.zeros_like(x0)

    def value(xv):
        t = Tape()
        return float(f(t, t.constant(xv)).value)

    ref = max(float(np.sqrt(np.mean(x0**2))), np.finfo(float).tiny)
    fd = np.zeros_like(x0)
    flat, fd_flat = x0.reshape(-1), fd.reshape(-1)

    def shifted(i, d):
        xs = flat.copy()
        xs[i] += d
        return value(xs.reshape(x0.shape))

    for i in range(flat.size):
        h = eps * max(abs(flat[i]), ref)
        d1 = shifted(i, h) - shifted(i, -h)
        d2 = shifted(i, 2 * h) - shifted(i, -2 * h)
        fd_flat[i] = (8 * d1 - d2) / (12 * h)
    scale_ = max(np.max(np.abs(fd)), np.max(np.abs(ad)))
    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), floor * scale_)
    denom = np.where(denom == 0, 1.0, denom)
    return float(np.max(np.abs(ad - fd) / denom)), ad, fd


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
    if norm > max_norm and norm > 0:
        k = max_norm / norm
        grads = {name: g * k for name, g in grads.items()}
    return grads, norm


class AdamState:
    def __init__(self, params: dict):
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_update(params: dict, grads: dict, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> dict:
    """One bias-corrected Adam step. ``lr`` is a float or a ``{name: lr}`` dict.

    Returns the new parameter dict; ``state`` is updated in place.
    """
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ValueError(f"gradient for {k!r} has shape {g.shape}, parameter {params[k].shape}")
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    out = dict(params)
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        step_lr = lr[k] if isinstance(lr, dict) else lr
        # m_hat / (sqrt(v_hat) + eps) with both corrections folded into scalars
        denom = np.sqrt(v)
        denom *= 1 / np.sqrt(c2)
        denom += eps
        out[k] = params[k] - (step_lr / c1) * (m / denom)
    return out
