"""Dense linear algebra primitives and a small reverse-mode gradient tape.

Matrices are plain 2-D numpy arrays. Storage dtype is float32; float64 is
accepted everywhere and is used by the gradient-check tests, where central
finite differences need the extra precision.

Matrix products run through explicit numba kernels that accumulate over the
inner dimension strictly left to right, so results are bit-reproducible for
a fixed build and match a naive triple-loop product exactly. BLAS gives no
such guarantee.

The tape records a fixed, small set of primitives (the model zoo here is
linear heads, one MLP with batchnorm, and a CTC projection); it is not a
general autodiff engine.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .errors import (
    DegenerateVectorError,
    EmptyInputError,
    InfeasibleAlignmentError,
    NumericError,
    ShapeError,
    TapeStateError,
)

DEFAULT_NORM_EPS = 1e-12

_FLOAT_DTYPES = (np.float32, np.float64)


def _require_matrix(name: str, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.dtype not in _FLOAT_DTYPES:
        raise ShapeError(f"{name} must be float32 or float64, got {m.dtype}")
    return m


def _require_finite(name: str, m: np.ndarray) -> np.ndarray:
    if not np.isfinite(m).all():
        raise NumericError(f"{name} contains non-finite values")
    return m


@njit(cache=True)
def _mm_nn(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]


@njit(cache=True)
def _mm_nt(a, b, out):
    # out = a @ b.T; per-element dot over the shared trailing axis.
    m, k = a.shape
    n = b.shape[0]
    for i in range(m):
        for j in range(n):
            acc = a[i, 0] * b[j, 0]
            for p in range(1, k):
                acc += a[i, p] * b[j, p]
            out[i, j] = acc


@njit(cache=True)
def _mm_tn(a, b, out):
    # out = a.T @ b with a of shape K x M.
    k, m = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
    for p in range(k):
        for i in range(m):
            api = a[p, i]
            for j in range(n):
                out[i, j] += api * b[p, j]


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
    _mm_nn(a, b, out)
    return out


def _mmnt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty((a.shape[0], b.shape[0]), dtype=a.dtype)
    _mm_nt(a, b, out)
    return out


def _mmtn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty((a.shape[1], b.shape[1]), dtype=a.dtype)
    _mm_tn(a, b, out)
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with deterministic left-to-right accumulation."""
    a = _require_matrix("left operand", a)
    b = _require_matrix("right operand", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}: inner dimensions differ")
    if a.dtype != b.dtype:
        raise ShapeError(f"operand dtypes differ: {a.dtype} vs {b.dtype}")
    out = _mm(np.ascontiguousarray(a), np.ascontiguousarray(b))
    return _require_finite("matmul result", out)


def l2_normalize_rows(m: np.ndarray, eps: float = DEFAULT_NORM_EPS) -> np.ndarray:
    """Scale each row to unit Euclidean norm."""
    m = _require_matrix("matrix", m)
    norms = np.sqrt(np.sum(m * m, axis=1))
    bad = np.nonzero(norms <= eps)[0]
    if bad.size:
        raise DegenerateVectorError(f"row {int(bad[0])} has norm {norms[bad[0]]!r} <= eps={eps!r}")
    out = m / norms[:, None]
    return _require_finite("normalized rows", out)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction."""
    m = _require_matrix("matrix", m)
    _require_finite("softmax input", m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _logsumexp_rows(m: np.ndarray) -> np.ndarray:
    mx = m.max(axis=1, keepdims=True)
    return (mx + np.log(np.exp(m - mx).sum(axis=1, keepdims=True)))[:, 0]


def cross_entropy_mean(logits: np.ndarray, labels) -> float:
    """Mean over rows of -log softmax(logits)[row, label]."""
    logits = _require_matrix("logits", logits)
    _require_finite("logits", logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"need one label per row: {labels.shape} vs {logits.shape[0]} rows")
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise IndexError(f"label out of range [0, {c})")
    losses = _logsumexp_rows(logits) - logits[np.arange(n), labels]
    return float(np.mean(losses))


class Param:
    """Trainable array (matrix or 0-d scalar) with an accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, value, name: str = ""):
        v = np.array(value, copy=True)
        if v.dtype not in _FLOAT_DTYPES:
            v = v.astype(np.float32)
        self.value = v
        self.grad = np.zeros_like(v)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def reset_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param(name={self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


class BatchNormState:
    """Running statistics for a batchnorm layer, updated in training mode."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.running_mean = np.zeros((1, dim), dtype=dtype)
        self.running_var = np.ones((1, dim), dtype=dtype)

    def copy(self) -> "BatchNormState":
        other = BatchNormState(self.running_mean.shape[1], self.momentum, self.eps,
                               self.running_mean.dtype)
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        return other


class Node:
    """A value produced during a taped forward pass."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value: np.ndarray, requires_grad: bool):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


class Tape:
    """Records one forward pass over the primitive zoo; replays adjoints in reverse.

    Single-threaded, one training step per instance. backward() accumulates
    gradients into the Params given to leaf().
    """

    def __init__(self):
        self._ops: list = []
        self._leaves: list[tuple[Node, Param]] = []
        self._node_ids: set[int] = set()

    def _register(self, node: Node) -> Node:
        self._node_ids.add(id(node))
        return node

    def leaf(self, p: Param) -> Node:
        node = Node(p.value, True)
        self._leaves.append((node, p))
        return self._register(node)

    def constant(self, arr: np.ndarray) -> Node:
        return self._register(Node(np.asarray(arr), False))

    def _emit(self, value: np.ndarray, inputs: tuple[Node, ...], backward) -> Node:
        out = Node(value, any(n.requires_grad for n in inputs))
        if out.requires_grad:
            self._ops.append((out, backward))
        return self._register(out)

    # --- primitives -------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.shape[1] != b.value.shape[0]:
            raise ShapeError(f"cannot multiply {a.value.shape} by {b.value.shape}")
        value = _mm(a.value, b.value)

        def backward(out):
            g = out.grad
            if a.requires_grad:
                a._accumulate(_mmnt(g, b.value))
            if b.requires_grad:
                b._accumulate(_mmtn(a.value, g))

        return self._emit(value, (a, b), backward)

    def matmul_nt(self, a: Node, b: Node) -> Node:
        """a @ b.T without materializing the transpose."""
        if a.value.shape[1] != b.value.shape[1]:
            raise ShapeError(f"cannot pair {a.value.shape} with {b.value.shape} rows")
        value = _mmnt(a.value, b.value)

        def backward(out):
            g = out.grad
            if a.requires_grad:
                a._accumulate(_mm(g, b.value))
            if b.requires_grad:
                b._accumulate(_mmtn(g, a.value))

        return self._emit(value, (a, b), backward)

    def transpose(self, a: Node) -> Node:
        value = np.ascontiguousarray(a.value.T)

        def backward(out):
            a._accumulate(np.ascontiguousarray(out.grad.T))

        return self._emit(value, (a,), backward)

    def add_bias(self, x: Node, b: Node) -> Node:
        if b.value.shape != (1, x.value.shape[1]):
            raise ShapeError(f"bias shape {b.value.shape} does not match {x.value.shape}")
        value = x.value + b.value

        def backward(out):
            g = out.grad
            if x.requires_grad:
                x._accumulate(g)
            if b.requires_grad:
                b._accumulate(g.sum(axis=0, keepdims=True))

        return self._emit(value, (x, b), backward)

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"cannot add {a.value.shape} and {b.value.shape}")
        value = a.value + b.value

        def backward(out):
            g = out.grad
            a._accumulate(g)
            b._accumulate(g)

        return self._emit(value, (a, b), backward)

    def scale_const(self, x: Node, c: float) -> Node:
        c = x.value.dtype.type(c)
        value = x.value * c

        def backward(out):
            x._accumulate(out.grad * c)

        return self._emit(value, (x,), backward)

    def scale_exp(self, x: Node, s: Node) -> Node:
        """x scaled by exp(s) for a 0-d log-scale node."""
        if s.value.shape != ():
            raise ShapeError(f"log scale must be 0-d, got {s.value.shape}")
        factor = np.exp(s.value)
        value = x.value * factor

        def backward(out):
            g = out.grad
            if x.requires_grad:
                x._accumulate(g * factor)
            if s.requires_grad:
                s._accumulate(np.asarray((g * value).sum(), dtype=s.value.dtype))

        return self._emit(value, (x, s), backward)

    def l2_normalize_rows(self, x: Node, eps: float = DEFAULT_NORM_EPS) -> Node:
        norms = np.sqrt(np.sum(x.value * x.value, axis=1))
        bad = np.nonzero(norms <= eps)[0]
        if bad.size:
            raise DegenerateVectorError(f"row {int(bad[0])} has norm <= eps={eps!r}")
        inv = (1.0 / norms)[:, None].astype(x.value.dtype)
        value = x.value * inv

        def backward(out):
            g = out.grad
            dots = np.sum(g * value, axis=1, keepdims=True)
            x._accumulate((g - dots * value) * inv)

        return self._emit(value, (x,), backward)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        value = np.where(mask, x.value, x.value.dtype.type(0))

        def backward(out):
            x._accumulate(out.grad * mask)

        return self._emit(value, (x,), backward)

    def mean_pool(self, x: Node) -> Node:
        """Column means of a T x D node as a 1 x D node."""
        t = x.value.shape[0]
        if t == 0:
            raise EmptyInputError("cannot pool an empty frame matrix")
        value = x.value.mean(axis=0, keepdims=True)

        def backward(out):
            x._accumulate(np.broadcast_to(out.grad / t, x.value.shape).astype(x.value.dtype))

        return self._emit(value, (x,), backward)

    def batchnorm(self, x: Node, gamma: Node, beta: Node, state: BatchNormState,
                  training: bool) -> Node:
        n, d = x.value.shape
        if gamma.value.shape != (1, d) or beta.value.shape != (1, d):
            raise ShapeError("gamma/beta must be 1 x dim")
        eps = x.value.dtype.type(state.eps)
        if training:
            if n < 2:
                from .errors import BatchTooSmallError

                raise BatchTooSmallError("batch statistics need at least 2 rows")
            mean = x.value.mean(axis=0, keepdims=True)
            var = ((x.value - mean) ** 2).mean(axis=0, keepdims=True)
            # Unbiased variance feeds the running estimate; biased normalizes.
            mom = state.running_mean.dtype.type(state.momentum)
            state.running_mean = (1 - mom) * state.running_mean + mom * mean.astype(state.running_mean.dtype)
            state.running_var = (1 - mom) * state.running_var + mom * (var * n / (n - 1)).astype(state.running_var.dtype)
        else:
            mean = state.running_mean.astype(x.value.dtype)
            var = state.running_var.astype(x.value.dtype)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.value - mean) * inv_std
        value = gamma.value * xhat + beta.value

        def backward(out):
            g = out.grad
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=0, keepdims=True))
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=0, keepdims=True))
            if x.requires_grad:
                gx = g * gamma.value
                if training:
                    # Batch statistics depend on x, so the adjoint carries the
                    # mean/variance terms.
                    m1 = gx.mean(axis=0, keepdims=True)
                    m2 = (gx * xhat).mean(axis=0, keepdims=True)
                    x._accumulate((gx - m1 - xhat * m2) * inv_std)
                else:
                    x._accumulate(gx * inv_std)

        return self._emit(value, (x, gamma, beta), backward)

    def softmax_cross_entropy(self, logits: Node, labels) -> Node:
        """Mean cross-entropy against integer labels, fused with row softmax."""
        labels = np.asarray(labels, dtype=np.int64)
        n, c = logits.value.shape
        if labels.shape != (n,):
            raise ShapeError(f"need {n} labels, got shape {labels.shape}")
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
            raise IndexError(f"label out of range [0, {c})")
        probs = softmax_rows(logits.value)
        losses = _logsumexp_rows(logits.value) - logits.value[np.arange(n), labels]
        value = np.asarray(np.mean(losses), dtype=logits.value.dtype)

        def backward(out):
            g = out.grad  # 0-d
            delta = probs.copy()
            delta[np.arange(n), labels] -= 1
            logits._accumulate(delta * (g / logits.value.dtype.type(n)))

        return self._emit(value, (logits,), backward)

    def log_softmax_rows(self, x: Node) -> Node:
        value = x.value - _logsumexp_rows(x.value)[:, None]

        def backward(out):
            g = out.grad
            sm = np.exp(value)
            x._accumulate(g - sm * g.sum(axis=1, keepdims=True))

        return self._emit(value, (x,), backward)

    def ctc(self, logprobs: Node, target: np.ndarray, blank: int = 0) -> Node:
        """Negative log-likelihood of a label sequence under per-frame log-probs.

        Forward algorithm over the blank-interleaved state lattice; the adjoint
        comes from the forward-backward occupancies.
        """
        target = np.asarray(target, dtype=np.int64)
        ext = _extend_targets(target, blank)
        _check_ctc_feasible(logprobs.value.shape[0], target)
        alpha = _ctc_alpha(logprobs.value, ext)
        log_total = _ctc_total(alpha)
        if not np.isfinite(log_total):
            raise NumericError("CTC forward produced a non-finite log-likelihood")
        value = np.asarray(-log_total, dtype=logprobs.value.dtype)

        def backward(out):
            g = out.grad
            beta = _ctc_beta(logprobs.value, ext)
            grad = _ctc_grad_logprobs(logprobs.value, ext, alpha, beta, log_total)
            logprobs._accumulate(grad * g)

        return self._emit(value, (logprobs,), backward)

    # --- driver -----------------------------------------------------------

    def backward(self, out: Node) -> None:
        """Seed d(out)=1 and accumulate adjoints into every touched Param."""
        if not self._ops:
            raise TapeStateError("backward called before any recorded forward op")
        if id(out) not in self._node_ids:
            raise TapeStateError("output node does not belong to this tape")
        if out.value.size != 1:
            raise ShapeError(f"backward requires a scalar output, got shape {out.value.shape}")
        out.grad = np.ones_like(out.value)
        for node, fn in reversed(self._ops):
            if node.grad is not None:
                fn(node)
        for node, p in self._leaves:
            if node.grad is not None:
                p.grad += node.grad


def finite_difference_grad(f, x: Param, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of scalar f with respect to x."""
    value = x.value
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray,
                            floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a| + |n|, floor).

    The floor turns the comparison into an absolute one for entries whose
    true gradient is (near) zero, where a pure ratio would amplify finite
    difference roundoff noise (about 1e-11 at h=1e-5 in float64) into a
    spurious mismatch.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


# --- CTC kernels ------------------------------------------------------------


def _extend_targets(target: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * target.shape[0] + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_frames_for_target(target) -> int:
    """Smallest frame count admitting a valid alignment."""
    target = np.asarray(target, dtype=np.int64)
    repeats = int(np.sum(target[1:] == target[:-1])) if target.size > 1 else 0
    return int(target.size) + repeats


def _check_ctc_feasible(t: int, target: np.ndarray) -> None:
    need = min_frames_for_target(target)
    if t < need:
        raise InfeasibleAlignmentError(
            f"target of length {target.size} needs at least {need} frames, got {t}")


@njit(cache=True)
def _lae(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


@njit(cache=True)
def _ctc_alpha(lp, ext):
    t_len = lp.shape[0]
    s_len = ext.shape[0]
    alpha = np.full((t_len, s_len), -np.inf, dtype=np.float64)
    alpha[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        for s in range(s_len):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = _lae(acc, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != ext[0] and ext[s] != ext[s - 2]:
                acc = _lae(acc, alpha[t - 1, s - 2])
            alpha[t, s] = acc + lp[t, ext[s]]
    return alpha


@njit(cache=True)
def _ctc_beta(lp, ext):
    # beta[t, s] covers emissions strictly after t, so alpha + beta is the
    # total log-probability of paths through state s at time t.
    t_len = lp.shape[0]
    s_len = ext.shape[0]
    beta = np.full((t_len, s_len), -np.inf, dtype=np.float64)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        for s in range(s_len):
            acc = beta[t + 1, s] + lp[t + 1, ext[s]]
            if s + 1 < s_len:
                acc = _lae(acc, beta[t + 1, s + 1] + lp[t + 1, ext[s + 1]])
            if s + 2 < s_len and ext[s + 2] != ext[0] and ext[s + 2] != ext[s]:
                acc = _lae(acc, beta[t + 1, s + 2] + lp[t + 1, ext[s + 2]])
            beta[t, s] = acc
    return beta


@njit(cache=True)
def _ctc_grad_logprobs(lp, ext, alpha, beta, log_total):
    t_len, v = lp.shape
    s_len = ext.shape[0]
    occ = np.full((t_len, v), -np.inf, dtype=np.float64)
    for t in range(t_len):
        for s in range(s_len):
            k = ext[s]
            occ[t, k] = _lae(occ[t, k], alpha[t, s] + beta[t, s])
    grad = np.zeros((t_len, v), dtype=lp.dtype)
    for t in range(t_len):
        for k in range(v):
            if occ[t, k] != -np.inf:
                grad[t, k] = -math.exp(occ[t, k] - log_total)
    return grad


def _ctc_total(alpha: np.ndarray) -> float:
    s_len = alpha.shape[1]
    total = alpha[-1, s_len - 1]
    if s_len > 1:
        total = np.logaddexp(total, alpha[-1, s_len - 2])
    return float(total)


def ctc_negative_log_likelihood(logprobs: np.ndarray, target, blank: int = 0) -> float:
    """Pure forward-algorithm CTC loss on row log-probabilities."""
    logprobs = _require_matrix("logprobs", logprobs)
    target = np.asarray(target, dtype=np.int64)
    _check_ctc_feasible(logprobs.shape[0], target)
    if target.size and (target.min() < 1 or target.max() >= logprobs.shape[1]):
        raise IndexError("target symbol out of range (index 0 is the blank)")
    alpha = _ctc_alpha(np.ascontiguousarray(logprobs, dtype=np.float64),
                       _extend_targets(target, blank))
    total = _ctc_total(alpha)
    if not np.isfinite(total):
        raise NumericError("CTC forward produced a non-finite log-likelihood")
    return -total
