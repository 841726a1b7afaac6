"""Reverse-mode automatic differentiation over dense float64 tensors.

Only the primitives the verifier models and losses need.  Forward values are
plain numpy arrays; recording happens when a Tape is active (context
manager), so inference with no tape has no bookkeeping cost and is
reentrant.  All accumulation is 64-bit, which keeps finite-difference checks
tight at desk scale.

Gradient flow: each primitive registers one vector-Jacobian closure per
tracked input.  backward() sweeps the tape in reverse, accumulating (+=)
across fan-out, and deposits results into the .grad buffers of tensors
marked requires_grad.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

_PROB_CLIP = 1e-12
_LN_EPS = 1e-5
_INV_SQRT2 = 2.0 ** -0.5
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """A primitive produced a non-finite value."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, got {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_STACK = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STACK, "stack", None)
    if stack is None:
        stack = []
        _STACK.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Recording of primitive applications, in forward (topological) order."""

    def __init__(self):
        self._records: list[tuple[Tensor, list]] = []
        self._live: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self._records)

    def clear(self) -> None:
        self._records.clear()
        self._live.clear()

    def _tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._live


def _emit(op: str, out_data: np.ndarray, pairs: list) -> Tensor:
    """Wrap a forward result, check finiteness, record tracked inputs."""
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op} produced non-finite values")
    out_data = np.asarray(out_data)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tracked = [(t, vjp) for t, vjp in pairs if tape._tracked(t)]
        if tracked:
            tape._records.append((out, tracked))
            tape._live.add(id(out))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for all requires_grad leaves.

    The tape is cleared afterwards; grads add (+=) across calls and fan-out.
    """
    if loss.data.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    if id(loss) not in tape._live:
        raise ContractError("loss is not on the tape")
    flowing: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for out, pairs in reversed(tape._records):
        g = flowing.pop(id(out), None)
        if g is None:
            continue
        for inp, vjp in pairs:
            contribution = vjp(g)
            if inp.requires_grad:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += contribution
            else:
                key = id(inp)
                if key in flowing:
                    flowing[key] = flowing[key] + contribution
                else:
                    flowing[key] = contribution
    tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _need_2d(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.data.ndim != 2:
            raise DimensionError(f"{op} expects 2-D operands, got shape {t.data.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d("matmul", a, b)
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    a_data, b_data = a.data, b.data
    with np.errstate(over="ignore", invalid="ignore"):
        out = a_data @ b_data
    return _emit(
        "matmul",
        out,
        [(a, lambda g: g @ b_data.T), (b, lambda g: a_data.T @ g)],
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add shapes {a.data.shape} + {b.data.shape}") from None
    a_shape, b_shape = a.data.shape, b.data.shape
    return _emit(
        "add",
        out,
        [(a, lambda g: _unbroadcast(g, a_shape)), (b, lambda g: _unbroadcast(g, b_shape))],
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul shapes {a.data.shape} * {b.data.shape}") from None
    a_data, b_data = a.data, b.data
    return _emit(
        "mul",
        out,
        [
            (a, lambda g: _unbroadcast(g * b_data, a_data.shape)),
            (b, lambda g: _unbroadcast(g * a_data, b_data.shape)),
        ],
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    with np.errstate(over="ignore", invalid="ignore"):
        out = x.data * c
    return _emit("scale", out, [(x, lambda g: g * c)])


def transpose(x: Tensor) -> Tensor:
    _need_2d("transpose", x)
    return _emit("transpose", x.data.T.copy(), [(x, lambda g: g.T.copy())])


def row_softmax_with_additive_mask(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax per row of scores + mask, where mask entries are 0 or -inf.

    Rows whose mask is entirely -inf output all-zero weights rather than NaN;
    the mask builder separately guarantees every row keeps a permitted key.
    """
    _need_2d("row_softmax_with_additive_mask", scores)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != scores.data.shape:
        raise DimensionError(
            f"mask shape {mask.shape} != scores shape {scores.data.shape}"
        )
    if not np.all((mask == 0.0) | np.isneginf(mask)):
        raise ContractError("mask entries must be 0 or -inf")
    z = scores.data + mask
    rowmax = np.max(z, axis=1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    expz = np.exp(z - rowmax)
    denom = expz.sum(axis=1, keepdims=True)
    weights = expz / np.where(denom > 0.0, denom, 1.0)

    def grad_scores(g: np.ndarray) -> np.ndarray:
        inner = (g * weights).sum(axis=1, keepdims=True)
        return weights * (g - inner)

    return _emit("row_softmax_with_additive_mask", weights, [(scores, grad_scores)])


def sigmoid(x: Tensor) -> Tensor:
    data = x.data
    out = np.empty_like(data)
    pos = data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-data[pos]))
    ex = np.exp(data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", out, [(x, lambda g: g * out * (1.0 - out))])


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU: x * Phi(x)."""
    data = x.data
    cdf = 0.5 * (1.0 + erf(data * _INV_SQRT2))
    pdf = np.exp(-0.5 * data * data) * _INV_SQRT_2PI
    return _emit("gelu", data * cdf, [(x, lambda g: g * (cdf + data * pdf))])


def layer_norm(x: Tensor) -> Tensor:
    """Normalize each row to zero mean, unit variance (no affine)."""
    _need_2d("layer_norm", x)
    data = x.data
    mu = data.mean(axis=1, keepdims=True)
    centered = data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = centered * inv

    def grad_x(g: np.ndarray) -> np.ndarray:
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        return inv * (g - gm - xhat * gx)

    return _emit("layer_norm", xhat, [(x, grad_x)])


def mean_rows(x: Tensor) -> Tensor:
    _need_2d("mean_rows", x)
    n = x.data.shape[0]
    out = x.data.mean(axis=0, keepdims=True)
    return _emit("mean_rows", out, [(x, lambda g: np.repeat(g / n, n, axis=0))])


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows needs at least one input")
    _need_2d("concat_rows", *parts)
    width = parts[0].data.shape[1]
    for p in parts:
        if p.data.shape[1] != width:
            raise DimensionError("concat_rows operands differ in width")
    out = np.concatenate([p.data for p in parts], axis=0)
    pairs = []
    offset = 0
    for p in parts:
        rows = p.data.shape[0]
        start, stop = offset, offset + rows

        def grad_part(g: np.ndarray, start=start, stop=stop) -> np.ndarray:
            return g[start:stop]

        pairs.append((p, grad_part))
        offset = stop
    return _emit("concat_rows", out, pairs)


def gather_rows(x: Tensor, indices) -> Tensor:
    _need_2d("gather_rows", x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("gather_rows indices must be a flat list")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise DimensionError("gather_rows index out of range")
    shape = x.data.shape

    def grad_x(g: np.ndarray) -> np.ndarray:
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return _emit("gather_rows", x.data[idx], [(x, grad_x)])


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.data.shape
    return _emit("sum", np.asarray(x.data.sum()), [(x, lambda g: np.full(shape, float(g)))])


def bce_sum(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Binary cross-entropy summed over all entries.

    Probabilities are clamped to [1e-12, 1 - 1e-12] before the logs; the
    gradient is zero where the clamp is active.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != probs.data.shape:
        raise DimensionError(
            f"labels shape {labels.shape} != probs shape {probs.data.shape}"
        )
    p = np.clip(probs.data, _PROB_CLIP, 1.0 - _PROB_CLIP)
    loss = -(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)).sum()
    unclamped = (probs.data > _PROB_CLIP) & (probs.data < 1.0 - _PROB_CLIP)

    def grad_probs(g: np.ndarray) -> np.ndarray:
        return float(g) * unclamped * (p - labels) / (p * (1.0 - p))

    return _emit("bce_sum", np.asarray(loss), [(probs, grad_probs)])


def finite_diff_check(f, params: list[Tensor], eps: float) -> float:
    """Max relative error between analytic grads of f and central differences.

    f maps the (mutated in place) params to a scalar Tensor and must be
    deterministic.  Relative error uses denominator max(|analytic|,
    |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    with Tape() as tape:
        loss = f(params)
        backward(loss, tape)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    worst = 0.0
    for p, grads in zip(params, analytic):
        for idx in np.ndindex(p.data.shape):
            original = p.data[idx]
            p.data[idx] = original + eps
            f_plus = float(f(params).data)
            p.data[idx] = original - eps
            f_minus = float(f(params).data)
            p.data[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(grads[idx]), abs(numeric), 1e-8)
            worst = max(worst, abs(grads[idx] - numeric) / denom)
    return worst
