"""Dense float64 tensors with an optional reverse-mode tape.

A :class:`Tensor` is an immutable wrapper around a numpy array. Operations on
untraced tensors just compute values. Once a tensor has been registered with
:meth:`Tape.watch`, every primitive that consumes it (directly or through
intermediate results) is appended to that tape, and :meth:`Tape.backward`
walks the record in reverse to accumulate adjoints.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "tid")

    def __init__(self, data, tape: "Tape | None" = None, tid: int | None = None):
        arr = np.asarray(data, dtype=np.float64).view()
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.tid = tid

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        return self.data.ravel().tolist()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        if self.tape is None:
            return self
        return Tensor(self.data)

    def __repr__(self) -> str:
        traced = "" if self.tape is None else f", tid={self.tid}"
        return f"Tensor({self.data.tolist()}{traced})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, _as_tensor(other))

    __rmul__ = __mul__


def _wrap(arr: np.ndarray, tape: "Tape | None" = None, tid: int | None = None) -> Tensor:
    # fast path for freshly computed float64 arrays that nothing else references
    arr.flags.writeable = False
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.tape = tape
    t.tid = tid
    return t


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape))


class Tape:
    """Ordered record of primitive applications.

    Each entry is ``(output_id, input_ids, backward_fn)`` where ``backward_fn``
    maps the output adjoint to a tuple of input adjoints (None for inputs that
    are not traced).
    """

    def __init__(self):
        self.nodes: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self.leaves: dict[int, Tensor] = {}
        self.gradients: dict[int, np.ndarray] = {}
        self._next = 0

    def _new_id(self) -> int:
        self._next += 1
        return self._next

    def watch(self, value) -> Tensor:
        src = value.data if isinstance(value, Tensor) else value
        t = Tensor(np.array(src, dtype=np.float64), self, self._new_id())
        self.leaves[t.tid] = t
        return t

    def record(self, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
        self._next += 1
        t = _wrap(out, self, self._next)
        self.nodes.append((t.tid, tuple(x.tid if x.tape is self else None for x in inputs), backward_fn))
        return t

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(root)/d(value) for every recorded value.

        Returns the gradient map restricted to watched leaves; leaves the root
        does not depend on get zero arrays.
        """
        if root.data.size != 1:
            raise DomainError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {}
        if root.tape is self:
            grads[root.tid] = np.ones_like(root.data)
        for tid, input_ids, fn in reversed(self.nodes):
            g = grads.pop(tid, None)
            if g is None:
                continue
            for iid, gi in zip(input_ids, fn(g)):
                if iid is None or gi is None:
                    continue
                if iid in grads:
                    grads[iid] = grads[iid] + gi
                else:
                    grads[iid] = gi
        self.gradients = {
            tid: grads.get(tid, np.zeros_like(leaf.data)) for tid, leaf in self.leaves.items()
        }
        return self.gradients

    def grad(self, leaf: Tensor) -> np.ndarray:
        return self.gradients[leaf.tid]


def _emit(out, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = None
    for x in inputs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands are recorded on different tapes")
            tape = x.tape
    if not isinstance(out, np.ndarray):
        out = np.array(out, dtype=np.float64)
    if tape is None:
        return _wrap(out)
    return tape.record(out, inputs, backward_fn)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- linear algebra -----------------------------------------------------------


def matvec(W: Tensor, x: Tensor) -> Tensor:
    """W @ x for a vector x, or x @ W.T (W applied to each row) for a matrix x."""
    w, v = W.data, x.data
    if w.ndim != 2 or v.ndim not in (1, 2) or w.shape[1] != v.shape[-1]:
        raise DimensionError(f"matvec: cannot apply {W.shape} to {x.shape}")
    if v.ndim == 1:
        out = w @ v

        def back(g):
            return np.outer(g, v), w.T @ g
    else:
        out = v @ w.T

        def back(g):
            return g.T @ v, g @ w
    return _emit(out, (W, x), back)


def linear(terms: Sequence[tuple[Tensor, Tensor]], bias: Tensor | None = None) -> Tensor:
    """Sum of ``matvec(W, x)`` over ``terms`` plus an optional bias, as one primitive.

    Every x must be a vector, or every x a matrix of rows (bias then added per row).
    """
    if not terms:
        raise DomainError("linear needs at least one term")
    out = None
    for W, x in terms:
        w, v = W.data, x.data
        if w.ndim != 2 or v.ndim not in (1, 2) or w.shape[1] != v.shape[-1]:
            raise DimensionError(f"linear: cannot apply {W.shape} to {x.shape}")
        y = w @ v if v.ndim == 1 else v @ w.T
        if out is None:
            out = y
        elif y.shape != out.shape:
            raise DimensionError(f"linear: term shapes {out.shape} vs {y.shape}")
        else:
            out += y
    if bias is not None:
        if bias.data.shape != out.shape[-1:]:
            raise DimensionError(f"linear: bias {bias.shape} for output {out.shape}")
        out = out + bias.data
    inputs = [t for pair in terms for t in pair]
    if bias is not None:
        inputs.append(bias)
    if all(t.tape is None for t in inputs):
        return _wrap(out)
    rows = out.ndim == 2
    pairs = [(W.data, x.data) for W, x in terms]

    def back(g):
        grads = []
        for w, v in pairs:
            if rows:
                grads.append(g.T @ v)
                grads.append(g @ w)
            else:
                grads.append(np.outer(g, v))
                grads.append(w.T @ g)
        if bias is not None:
            grads.append(g.sum(axis=0) if rows else g)
        return grads

    return _emit(out, inputs, back)


def dot(a: Tensor, b: Tensor) -> Tensor:
    _check_same("dot", a, b)
    if a.data.ndim != 1:
        raise DimensionError(f"dot: expected vectors, got {a.shape}")
    av, bv = a.data, b.data
    return _emit(np.array(av @ bv), (a, b), lambda g: (g * bv, g * av))


def outer(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.data, b.data
    if av.ndim != 1 or bv.ndim != 1:
        raise DimensionError(f"outer: expected vectors, got {a.shape} and {b.shape}")
    return _emit(np.outer(av, bv), (a, b), lambda g: (g @ bv, av @ g))


# -- elementwise --------------------------------------------------------------


def _row_broadcast(a: Tensor, b: Tensor, op: str) -> bool:
    if a.shape == b.shape:
        return False
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return True
    raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may be a row vector added to every row of matrix a."""
    rows = _row_broadcast(a, b, "add")
    if rows:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same("hadamard", a, b)
    av, bv = a.data, b.data
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = -np.logaddexp(0.0, -x)
    s = _sigmoid(x)
    return _emit(y, (a,), lambda g: (g * (1.0 - s),))


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    unary = {"tanh": tanh, "sigmoid": sigmoid}
    binary = {"add": add, "sub": sub, "hadamard": hadamard}
    if op in unary:
        return unary[op](a)
    if op in binary:
        if b is None:
            raise DimensionError(f"{op} needs two operands")
        return binary[op](a, b)
    raise DomainError(f"unknown elementwise op {op!r}")


def softmax(scores: Tensor) -> Tensor:
    x = scores.data
    if x.ndim != 1 or x.size == 0:
        raise DomainError(f"softmax needs a non-empty vector, got shape {scores.shape}")
    ex = np.exp(x - x.max())
    y = ex / ex.sum()
    return _emit(y, (scores,), lambda g: (y * (g - g @ y),))


def log_softmax(scores: Tensor) -> Tensor:
    x = scores.data
    if x.ndim != 1 or x.size == 0:
        raise DomainError(f"log_softmax needs a non-empty vector, got shape {scores.shape}")
    shifted = x - x.max()
    y = shifted - np.log(np.exp(shifted).sum())
    p = np.exp(y)
    return _emit(y, (scores,), lambda g: (g - p * g.sum(),))


# -- reductions and reshaping ---------------------------------------------------


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def add_scalars(terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    return _emit(
        np.array(sum(float(t.data) for t in terms)),
        tuple(terms),
        lambda g: tuple(g for _ in terms),
    )


def index(a: Tensor, i: int) -> Tensor:
    """Scalar element ``a[i]`` of a vector."""
    n = a.shape[0]

    def back(g):
        out = np.zeros(n)
        out[i] = g
        return (out,)

    return _emit(np.array(a.data[i]), (a,), back)


def gather(a: Tensor, idx: Sequence[int]) -> Tensor:
    """Vector of the selected entries ``a[idx]``."""
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]

    def back(g):
        out = np.zeros(n)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(a.data[idx], (a,), back)


def scatter_add(blocks: Sequence[Tensor], targets: Sequence[Sequence[int]], n: int) -> Tensor:
    """Matrix with n rows where row j sums every block row routed to j."""
    if not blocks:
        raise DomainError("scatter_add of zero blocks")
    width = blocks[0].shape[1]
    out = np.zeros((n, width))
    idx = [np.asarray(t, dtype=np.intp) for t in targets]
    for b, ix in zip(blocks, idx):
        if b.data.ndim != 2 or b.shape[1] != width or b.shape[0] != len(ix):
            raise DimensionError(f"scatter_add: block {b.shape} with {len(ix)} targets")
        np.add.at(out, ix, b.data)
    return _emit(out, tuple(blocks), lambda g: tuple(g[ix] for ix in idx))


def stack(rows: Sequence[Tensor]) -> Tensor:
    if not rows:
        raise DomainError("stack of zero rows")
    shape = rows[0].shape
    for r in rows:
        if r.shape != shape or len(shape) != 1:
            raise DimensionError(f"stack: row shapes {shape} vs {r.shape}")
    out = np.array([r.data for r in rows])
    return _emit(out, tuple(rows), lambda g: tuple(g[k] for k in range(len(rows))))


def row(a: Tensor, i: int) -> Tensor:
    if a.tape is None:
        return _wrap(a.data[i])
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    return _emit(a.data[i], (a,), back)


# -- fused cells ------------------------------------------------------------------


def lstm_cell(C_prev: Tensor, h_prev: Tensor, x: Tensor, gates: Sequence[tuple[Tensor, Tensor, Tensor]]) -> Tensor:
    """One LSTM step as a single primitive; returns the rows ``[C_new, h_new]``.

    ``gates`` holds ``(W, U, b)`` for the forget, input, output and candidate
    gates in that order. Every gate pre-activation is ``W x + U h_prev + b``.
    """
    if len(gates) != 4:
        raise DomainError(f"lstm_cell needs 4 gates, got {len(gates)}")
    c, h, v = C_prev.data, h_prev.data, x.data
    if c.ndim != 1 or c.shape != h.shape:
        raise DimensionError(f"lstm_cell: cell {C_prev.shape} vs hidden {h_prev.shape}")
    acts = []
    for k, (W, U, b) in enumerate(gates):
        if W.shape != (c.size, v.size) or U.shape != (c.size, c.size) or b.shape != c.shape:
            raise DimensionError(f"lstm_cell: gate {k} shapes {W.shape}, {U.shape}, {b.shape}")
        pre = W.data @ v + U.data @ h + b.data
        acts.append(np.tanh(pre) if k == 3 else _sigmoid(pre))
    f, i, o, cand = acts
    C_new = f * c + i * cand
    tC = np.tanh(C_new)
    out = np.stack([C_new, o * tC])
    inputs = [C_prev, h_prev, x, *(t for g in gates for t in g)]
    if all(t.tape is None for t in inputs):
        return _wrap(out)
    Ws = [W.data for W, _, _ in gates]
    Us = [U.data for _, U, _ in gates]

    def back(g):
        gC, gh = g[0], g[1]
        go = gh * tC
        gC = gC + gh * o * (1.0 - tC * tC)
        d_pre = (gC * c * f * (1.0 - f), gC * cand * i * (1.0 - i), go * o * (1.0 - o), gC * i * (1.0 - cand * cand))
        gx = sum(W.T @ d for W, d in zip(Ws, d_pre))
        gh_prev = sum(U.T @ d for U, d in zip(Us, d_pre))
        grads = [gC * f, gh_prev, gx]
        for d in d_pre:
            grads.extend((np.outer(d, v), np.outer(d, h), d))
        return grads

    return _emit(out, inputs, back)


# -- gradient checking ----------------------------------------------------------


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    grad: np.ndarray,
    step: float = 1e-6,
) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).

    ``grad`` is the analytic gradient being checked; central differences of
    ``f`` around ``theta`` provide the reference.
    """
    if step <= 0:
        raise DomainError("step must be positive")
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != theta.shape:
        raise DimensionError(f"gradient shape {grad.shape} does not match theta {theta.shape}")
    f0 = f(theta.copy())
    if not np.isfinite(f0):
        raise NumericError(f"f(theta) is not finite: {f0}")
    worst = 0.0
    for k in range(theta.size):
        plus = theta.copy()
        plus[k] += step
        minus = theta.copy()
        minus[k] -= step
        fp, fm = f(plus), f(minus)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite value near coordinate {k}")
        fd = (fp - fm) / (2.0 * step)
        err = abs(grad[k] - fd) / max(1.0, abs(grad[k]), abs(fd))
        worst = max(worst, err)
    return worst
