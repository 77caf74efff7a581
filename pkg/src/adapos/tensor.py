"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps an immutable, C-contiguous ``float64`` numpy array.
Gradient tracking is opt-in: leaves are registered on a :class:`Tape` through
:meth:`ParamSet.track`, and every operation that touches a tracked input
appends one record to that tape.  :func:`backward` replays the records in
reverse order.

Broadcasting is limited to the "bias-add" pattern: the right operand's shape
must equal the left operand's shape or be a suffix of it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, OracleError, ShapeError, UsageError

LAYER_NORM_EPS = 1e-5
FD_STEP = 1e-5

Vjp = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


@dataclass(frozen=True)
class Record:
    inputs: tuple  # node id per input, None for untracked inputs
    output: int
    vjp: Vjp
    name: str


class Tape:
    """Ordered log of differentiable operations for one forward pass."""

    def __init__(self) -> None:
        self.records: list[Record] = []
        self._next_node = 0

    def new_node(self) -> int:
        node = self._next_node
        self._next_node += 1
        return node

    def __len__(self) -> int:
        return len(self.records)


class Tensor:
    __slots__ = ("_data", "node", "tape")

    def __init__(self, values, shape=None, *, node: int | None = None, tape: Tape | None = None):
        data = np.array(values, dtype=np.float64, order="C", copy=True)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if int(np.prod(shape, dtype=np.int64)) != data.size:
                raise ShapeError(f"cannot lay out {data.size} values as shape {shape}")
            data = data.reshape(shape)
        if any(s <= 0 for s in data.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {data.shape}")
        data.flags.writeable = False
        self._data = data
        self.node = node
        self.tape = tape

    @classmethod
    def _wrap(cls, data: np.ndarray, node=None, tape=None) -> "Tensor":
        # Internal constructor: takes ownership of ``data`` without copying.
        t = cls.__new__(cls)
        data = np.ascontiguousarray(data, dtype=np.float64)
        data.flags.writeable = False
        t._data = data
        t.node = node
        t.tape = tape
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def values(self) -> np.ndarray:
        return self._data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self._data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data)

    def __repr__(self) -> str:
        flag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
    tape = None
    for t in inputs:
        if t.node is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise UsageError(f"{name}: inputs are tracked on different tapes")
    if tape is None:
        return Tensor._wrap(data)
    out = Tensor._wrap(data, node=tape.new_node(), tape=tape)
    tape.records.append(Record(tuple(t.node for t in inputs), out.node, vjp, name))
    return out


def _suffix_reduce(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_bias_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not bias-compatible")


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_broadcast("add", a, b)
    shape_b = b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g, need: (g if need[0] else None,
                                  _suffix_reduce(g, shape_b) if need[1] else None))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_broadcast("sub", a, b)
    shape_b = b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g, need: (g if need[0] else None,
                                  -_suffix_reduce(g, shape_b) if need[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g, need):
        return (g * bd if need[0] else None,
                _suffix_reduce(g * ad, bd.shape) if need[1] else None)

    return _emit("mul", ad * bd, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g, need: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g, need: (g * mask,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", xd * xd, (x,), lambda g, need: (2.0 * xd * g,))


def norm_lastdim(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the subgradient at 0 is taken as 0."""
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=-1))
    safe = np.where(n > 0, n, 1.0)

    def vjp(g, need):
        return (np.where((n > 0)[..., None], xd / safe[..., None], 0.0) * g[..., None],)

    return _emit("norm", n, (x,), vjp)


# -- reductions ----------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.array(x.data.sum()), (x,),
                 lambda g, need: (np.full(shape, g.item()),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _emit("mean", np.array(x.data.mean()), (x,),
                 lambda g, need: (np.full(shape, g.item() / n),))


def mean(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    if x.ndim == 1:
        return mean_all(x)
    n = x.shape[axis]
    shape = x.shape

    def vjp(g, need):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _emit("mean_axis", x.data.mean(axis=axis), (x,), vjp)


# -- shape manipulation --------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        shape = tuple(x.data.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g, need: (g.reshape(old),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("permute", np.transpose(x.data, axes), (x,),
                 lambda g, need: (np.transpose(g, inverse),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[start:stop]`` along the first axis."""
    n = x.shape[0]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {x.shape}")
    shape = x.shape

    def vjp(g, need):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _emit("slice_rows", x.data[start:stop], (x,), vjp)


def gather_rows(table: Tensor, rows: Sequence[int]) -> Tensor:
    idx = np.asarray(rows, dtype=np.int64)
    shape = table.shape

    def vjp(g, need):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather_rows", table.data[idx], (table,), vjp)


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes.  ``b`` is either a plain matrix shared
    across the batch or has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    shared = bd.ndim == 2

    def vjp(g, need):
        ga = gb = None
        if need[0]:
            ga = g @ np.swapaxes(bd, -1, -2)
        if need[1]:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), vjp)


def softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax input contains non-finite values")
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, need):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ConfigurationError(f"layer_norm needs at least 2 features, got {d}")
    if gain.shape != (d,) or offset.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    xd, gd = x.data, gain.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g, need):
        gx = None
        if need[0]:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = _suffix_reduce(g * xhat, (d,)) if need[1] else None
        goff = _suffix_reduce(g, (d,)) if need[2] else None
        return gx, ggain, goff

    return _emit("layer_norm", xhat * gd + offset.data, (x, gain, offset), vjp)


def conv1d_same(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded "same" cross-correlation.

    ``x`` is ``[..., c_in, L]``, ``kernels`` is ``[c_out, c_in, w]`` with odd
    ``w``, ``bias`` is ``[c_out]``.  Output is ``[..., c_out, L]``.
    """
    if x.ndim < 2:
        raise ShapeError(f"conv expects [..., c_in, L] input, got {x.shape}")
    return transpose(conv1d_same_cl(transpose(x), kernels, bias))


def conv1d_same_cl(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Channels-last variant of :func:`conv1d_same`: ``[..., L, c_in] -> [..., L, c_out]``."""
    if kernels.ndim != 3:
        raise ShapeError(f"conv kernels must be [c_out, c_in, w], got {kernels.shape}")
    c_out, c_in, w = kernels.shape
    if w % 2 == 0:
        raise ConfigurationError(f"conv kernel width must be odd, got {w}")
    if x.ndim < 2 or x.shape[-1] != c_in:
        raise ShapeError(f"conv expects {c_in} input channels, got input {x.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv bias must have shape ({c_out},), got {bias.shape}")
    pad = (w - 1) // 2
    L = x.shape[-2]
    lead = x.shape[:-2]
    xd = x.data
    if w == 1:
        xp, cols = xd, xd.reshape(-1, c_in)
    else:
        xp = np.pad(xd, [(0, 0)] * (xd.ndim - 2) + [(pad, pad), (0, 0)])
        # im2col: one row per (batch..., tap), columns ordered (offset, c_in)
        cols = np.stack([xp[..., j:j + L, :] for j in range(w)], axis=-2).reshape(-1, w * c_in)
    k2 = np.ascontiguousarray(np.transpose(kernels.data, (0, 2, 1))).reshape(c_out, w * c_in)
    out = (cols @ k2.T + bias.data).reshape(lead + (L, c_out))

    def vjp(g, need):
        gx = gk = gb = None
        g2 = g.reshape(-1, c_out)
        if need[0]:
            dcols = g2 @ k2
            if w == 1:
                gx = dcols.reshape(xd.shape)
            else:
                dcols = dcols.reshape(lead + (L, w, c_in))
                gxp = np.zeros(xp.shape)
                for j in range(w):
                    gxp[..., j:j + L, :] += dcols[..., j, :]
                gx = gxp[..., pad:pad + L, :]
        if need[1]:
            gk = np.transpose((g2.T @ cols).reshape(c_out, w, c_in), (0, 2, 1))
        if need[2]:
            gb = g2.sum(axis=0)
        return gx, gk, gb

    return _emit("conv1d", out, (x, kernels, bias), vjp)


# -- parameters and backward ---------------------------------------------------

class ParamSet(Mapping):
    """Named parameter tensors, iterated in lexicographic path order."""

    def __init__(self, entries: Mapping[str, "Tensor | np.ndarray"]):
        items = {}
        for path, value in entries.items():
            if not isinstance(path, str) or not path:
                raise ConfigurationError(f"bad parameter path {path!r}")
            items[path] = value if isinstance(value, Tensor) else Tensor(value)
        self._items = dict(sorted(items.items()))

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._items[path]
        except KeyError:
            raise KeyError(f"no parameter named {path!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def track(self, tape: Tape) -> "ParamSet":
        """Return a copy whose tensors are leaves on ``tape``."""
        tracked = {p: Tensor._wrap(t.data, node=tape.new_node(), tape=tape) for p, t in self._items.items()}
        return ParamSet(tracked)

    def detached(self) -> "ParamSet":
        return ParamSet({p: t.detach() for p, t in self._items.items()})

    def replace(self, updates: Mapping[str, "Tensor | np.ndarray"]) -> "ParamSet":
        merged = dict(self._items)
        for p, v in updates.items():
            if p not in merged:
                raise KeyError(f"no parameter named {p!r}")
            merged[p] = v if isinstance(v, Tensor) else Tensor(v)
        return ParamSet(merged)

    def size(self) -> int:
        return sum(t.data.size for t in self._items.values())

    def subset(self, prefix: str) -> dict:
        return {p: t for p, t in self._items.items() if p.startswith(prefix)}


def backward(loss: Tensor, tape: Tape, params: ParamSet) -> dict[str, Tensor]:
    """Gradient of a scalar ``loss`` with respect to every parameter in ``params``.

    Parameters unreachable from the loss get zero gradients.
    """
    if loss.node is None or loss.tape is not tape:
        raise UsageError("loss is not tracked on the given tape")
    if loss.data.size != 1:
        raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
    for path, t in params.items():
        if t.tape is not tape:
            raise UsageError(f"parameter {path!r} is not tracked on this tape")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    for rec in reversed(tape.records):
        if rec.output > loss.node:
            continue
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        need = [n is not None for n in rec.inputs]
        for node, gi in zip(rec.inputs, rec.vjp(g, need)):
            if node is None or gi is None:
                continue
            prev = grads.get(node)
            grads[node] = gi if prev is None else prev + gi
    return {p: Tensor._wrap(np.array(grads[t.node], dtype=np.float64).reshape(t.shape))
            if t.node in grads else Tensor._wrap(np.zeros(t.shape))
            for p, t in params.items()}


def value_and_grad(f: Callable[[ParamSet], Tensor], params: ParamSet) -> tuple[float, dict[str, Tensor]]:
    tape = Tape()
    tracked = params.track(tape)
    loss = f(tracked)
    return loss.item(), backward(loss, tape, tracked)


@dataclass
class FDReport:
    max_rel_error: dict[str, float]
    tol: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self) -> str:
        worst = max(self.max_rel_error.values(), default=0.0)
        status = "PASS" if self.passed else "FAIL " + ", ".join(self.failures)
        return f"finite-difference check: {status} (worst rel. err {worst:.2e}, tol {self.tol:.0e})"


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def finite_difference_check(f: Callable[[ParamSet], Tensor], params: ParamSet,
                            h: float = FD_STEP, tol: float = 1e-4,
                            floor: float = 1e-6) -> FDReport:
    """Compare :func:`backward` against central differences, element by element.

    Relative error is ``|fd - ad| / max(|fd|, |ad|, floor)``; ``floor`` keeps
    elements with vanishing gradients from amplifying roundoff.
    """
    if h <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    base = params.detached()
    f0, f1 = _scalar(f(base)), _scalar(f(base))
    if f0 != f1:
        raise OracleError(f"objective is not deterministic: {f0!r} != {f1!r}")
    _, grads = value_and_grad(f, base)
    report = FDReport({}, tol)
    for path, t in base.items():
        flat = t.data.reshape(-1)
        ad = grads[path].values
        worst = 0.0
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += h
            up = _scalar(f(base.replace({path: bumped.reshape(t.shape)})))
            bumped[i] = flat[i] - h
            down = _scalar(f(base.replace({path: bumped.reshape(t.shape)})))
            fd = (up - down) / (2 * h)
            err = abs(fd - ad[i]) / max(abs(fd), abs(ad[i]), floor)
            worst = max(worst, err)
        report.max_rel_error[path] = worst
        if worst > tol:
            report.failures.append(path)
    return report
