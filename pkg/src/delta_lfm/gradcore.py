"""Dense float64 tensors with a reverse-mode tape.

Tensors wrap numpy arrays. Every op whose inputs live on a :class:`Tape`
records a node holding a vector-Jacobian product; ``backward`` walks the
nodes in reverse creation order. Tensors created without a tape are plain
values and cost little more than the underlying numpy call, which is how
inference runs.

The thin SVD is a one-sided (Hestenes) Jacobi sweep, batched over leading
dimensions, with canonicalized signs so that singular vectors are a
well-defined function of the input.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "NonFiniteError",
    "SvdConvergenceError",
    "DegenerateSpectrumWarning",
    "SvdFactors",
    "SvdGrad",
    "svd_thin",
    "svd_backward",
    "canonicalize_signs",
    "svd",
    "backward",
    "check_gradients",
    "AdamW",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class SvdConvergenceError(RuntimeError):
    pass


class DegenerateSpectrumWarning(RuntimeWarning):
    pass


class Tape:
    """Ordered record of differentiable ops.

    Node ids are positions in ``nodes``; parents always have smaller ids.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def _record(self, t: "Tensor") -> int:
        self.nodes.append(t)
        return len(self.nodes) - 1

    def leaf(self, data, name: str | None = None) -> "Tensor":
        t = Tensor(data, tape=self)
        t.name = name
        return t

    def constant(self, data) -> "Tensor":
        return Tensor(data, tape=self, constant=True)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "tape", "id", "parents", "vjp", "constant", "name")
    __array_priority__ = 100

    def __init__(
        self,
        data,
        tape: Tape | None = None,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[np.ndarray], tuple] | None = None,
        constant: bool = False,
    ) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite value produced")
        self.data = arr
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.constant = constant
        self.name = None
        self.id = tape._record(self) if tape is not None else -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, id={self.id})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


# ---------------------------------------------------------------------------
# node construction helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("tensors recorded on different tapes")
            tape = x.tape
    return tape


def _needs_grad(x: Tensor) -> bool:
    return x.tape is not None and not x.constant


def _make(data, parents: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None or not any(_needs_grad(p) for p in parents):
        return Tensor(data, tape=tape, constant=tape is not None)
    return Tensor(data, tape=tape, parents=parents, vjp=vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _make(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),))


def abs_(a) -> Tensor:
    """|x| with subgradient 0 at the kink."""
    a = as_tensor(a)
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def sg(a) -> Tensor:
    """Stop-gradient: same value, recorded as a constant."""
    a = as_tensor(a)
    return Tensor(a.data, tape=a.tape, constant=a.tape is not None)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), vjp)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        gm = np.moveaxis(g, axis, 0)
        om = np.moveaxis(out, axis, 0)
        np.add.at(om, indices, gm)
        return (out,)

    return _make(np.take(a.data, indices, axis=axis), (a,), vjp)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd) if ad.ndim == 2 else g[..., None] * bd
            gb = ad.T @ g if ad.ndim == 2 else np.einsum("...ij,...i->j", ad, g)
            return _unbroadcast(ga, ad.shape), gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), vjp)


# ---------------------------------------------------------------------------
# SVD


@dataclass(frozen=True)
class SvdFactors:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    signs: np.ndarray


class SvdGrad(NamedTuple):
    grad: np.ndarray
    degenerate: bool


SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12
GRAD_CLAMP = 1e-8
DEGENERATE_GAP = 1e-6


def _jacobi_columns(W: np.ndarray, max_sweeps: int, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of each W[b] (m×n, m ≥ n) by plane rotations.

    Returns the rotated W and the accumulated rotation V so that W_in = W_out Vᵀ.
    """
    B, m, n = W.shape
    W = W.copy()
    V = np.broadcast_to(np.eye(n), (B, n, n)).copy()
    pairs = [(p, q) for p in range(n - 1) for q in range(p + 1, n)]
    for _ in range(max_sweeps):
        converged = True
        for p, q in pairs:
            wp = W[:, :, p]
            wq = W[:, :, q]
            alpha = np.einsum("bi,bi->b", wp, wp)
            beta = np.einsum("bi,bi->b", wq, wq)
            gamma = np.einsum("bi,bi->b", wp, wq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            converged = False
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            c_, s_ = c[:, None], s[:, None]
            W[:, :, p], W[:, :, q] = c_ * wp - s_ * wq, s_ * wp + c_ * wq
            vp = V[:, :, p].copy()
            vq = V[:, :, q]
            V[:, :, p], V[:, :, q] = c_ * vp - s_ * vq, s_ * vp + c_ * vq
        if converged:
            return W, V
    raise SvdConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")


def _complete_basis(U: np.ndarray, bad: np.ndarray) -> np.ndarray:
    """Replace the flagged columns of U by an orthonormal completion."""
    m, k = U.shape
    keep = [j for j in range(k) if not bad[j]]
    basis = [U[:, j] for j in keep]
    out = U.copy()
    e = 0
    for j in range(k):
        if not bad[j]:
            continue
        while True:
            cand = np.zeros(m)
            cand[e % m] = 1.0
            e += 1
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            nrm = np.linalg.norm(cand)
            if nrm > 1e-6:
                cand /= nrm
                break
        out[:, j] = cand
        basis.append(cand)
    return out


def canonicalize_signs(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flip (u_k, v_k) so the largest-magnitude entry of u_k is nonnegative.

    Ties resolve to the lowest row index. Works on a trailing pair of axes.
    """
    idx = np.argmax(np.abs(U), axis=-2)
    lead = np.take_along_axis(U, idx[..., None, :], axis=-2)[..., 0, :]
    signs = np.where(lead < 0, -1.0, 1.0)
    return U * signs[..., None, :], V * signs[..., None, :], signs


def _svd_batch(A: np.ndarray, max_sweeps: int = SVD_MAX_SWEEPS, tol: float = SVD_TOL):
    B, r, c = A.shape
    flip = r < c
    M = np.swapaxes(A, -1, -2) if flip else A
    W, V = _jacobi_columns(M, max_sweeps, tol)
    S = np.sqrt(np.einsum("bij,bij->bj", W, W))
    order = np.argsort(-S, axis=-1, kind="stable")
    S = np.take_along_axis(S, order, axis=-1)
    W = np.take_along_axis(W, order[:, None, :], axis=-1)
    V = np.take_along_axis(V, order[:, None, :], axis=-1)
    k = S.shape[-1]
    U = np.empty_like(W)
    for b in range(B):
        smax = S[b, 0]
        bad = S[b] <= smax * 1e-14 * max(r, c) if smax > 0 else np.ones(k, dtype=bool)
        with np.errstate(divide="ignore", invalid="ignore"):
            U[b] = np.where(bad[None, :], 0.0, W[b] / np.where(bad, 1.0, S[b])[None, :])
        if bad.any():
            U[b] = _complete_basis(U[b], bad)
    if flip:
        U, V = V, U
    U, V, signs = canonicalize_signs(U, V)
    assert U.shape[-1] == k
    return U, S, V, signs


def svd_thin(A, max_sweeps: int = SVD_MAX_SWEEPS, tol: float = SVD_TOL) -> SvdFactors:
    """Thin SVD of an r×c matrix (or a stack of them) with canonical signs.

    Singular values are sorted nonincreasing; for each column k the entry of
    u_k with the largest magnitude is nonnegative.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or min(A.shape[-2:]) < 1:
        raise ValueError(f"expected a nonempty matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("svd_thin input must be finite")
    lead = A.shape[:-2]
    U, S, V, signs = _svd_batch(A.reshape((-1,) + A.shape[-2:]), max_sweeps, tol)
    k = S.shape[-1]
    return SvdFactors(
        U=U.reshape(lead + U.shape[-2:]),
        S=S.reshape(lead + (k,)),
        V=V.reshape(lead + V.shape[-2:]),
        signs=signs.reshape(lead + (k,)),
    )


def svd_backward(factors: SvdFactors, grad_U=None, grad_S=None) -> SvdGrad:
    """Gradient w.r.t. A of a loss depending on (U, S) of A = U diag(S) Vᵀ.

    Denominators s_j² − s_i² are clamped to magnitude ≥ 1e-8. ``degenerate``
    reports near-equal singular values met while grad_U is nonzero.
    """
    U, S, V = factors.U, factors.S, factors.V
    gU = np.zeros_like(U) if grad_U is None else np.asarray(grad_U, dtype=np.float64)
    gS = np.zeros_like(S) if grad_S is None else np.asarray(grad_S, dtype=np.float64)
    Vt = np.swapaxes(V, -1, -2)
    inner = gS[..., :, None] * np.eye(S.shape[-1])
    degenerate = False
    if np.any(gU):
        k = S.shape[-1]
        off = ~np.eye(k, dtype=bool)
        gap = np.abs(S[..., None, :] - S[..., :, None])
        degenerate = bool(np.any(gap[..., off] < DEGENERATE_GAP))
        S2 = S * S
        E = S2[..., None, :] - S2[..., :, None]
        E = np.where(np.abs(E) < GRAD_CLAMP, np.where(E < 0, -GRAD_CLAMP, GRAD_CLAMP), E)
        E = np.where(off, E, 1.0)
        UtgU = np.swapaxes(U, -1, -2) @ gU
        skew = UtgU - np.swapaxes(UtgU, -1, -2)
        inner = inner + np.where(off, skew * S[..., None, :] / E, 0.0)
        grad = U @ inner @ Vt
        if U.shape[-2] > k:
            Sinv = np.where(S > 0, 1.0 / np.where(S > 0, S, 1.0), 0.0)
            proj = gU - U @ UtgU
            grad = grad + (proj * Sinv[..., None, :]) @ Vt
        if degenerate:
            warnings.warn("near-degenerate singular values in SVD backward", DegenerateSpectrumWarning)
        return SvdGrad(grad, degenerate)
    return SvdGrad(U @ inner @ Vt, False)


def svd(a) -> tuple[Tensor, Tensor]:
    """Differentiable (U, S) of a matrix or stack of matrices."""
    a = as_tensor(a)
    f = svd_thin(a.data)
    U = _make(f.U, (a,), lambda g: (svd_backward(f, grad_U=g).grad,))
    S = _make(f.S, (a,), lambda g: (svd_backward(f, grad_S=g).grad,))
    return U, S


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor | int) -> dict[int, np.ndarray]:
    """Gradients of a scalar node w.r.t. every non-constant node that reaches it."""
    if isinstance(loss, int):
        loss = tape.nodes[loss]
    if loss.tape is not tape:
        raise ValueError("loss node is not on this tape")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = grads.get(node.id)
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent.tape is None or parent.constant:
                continue
            if parent.id >= node.id:
                raise ValueError("cycle detected in tape")
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=np.float64)
    return {k: v for k, v in grads.items() if not tape.nodes[k].constant}


def check_gradients(
    f: Callable[[Tensor], Tensor], x, step: float = 1e-5, floor: float = 1e-8
) -> float:
    """Worst per-coordinate relative error of backward() against central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(x)
    out = f(xt)
    analytic = backward(tape, out).get(xt.id, np.zeros_like(x))

    def value(v: np.ndarray) -> float:
        y = float(f(Tensor(v)).data)
        if not math.isfinite(y):
            raise NonFiniteError("f returned a non-finite value")
        return y

    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        numeric = (value(xp.reshape(x.shape)) - value(xm.reshape(x.shape))) / (2 * step)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adaptive moments with decoupled weight decay over a dict of arrays."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ) -> None:
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in sorted(self.params):
            p = self.params[k]
            g = grads.get(k)
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def leaves(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Record each parameter array as a named leaf."""
    return {k: tape.leaf(params[k], name=k) for k in sorted(params)}


def grads_by_name(grads: dict[int, np.ndarray], named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: grads[t.id] for k, t in named.items() if t.id in grads}


def constants(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def iter_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)
