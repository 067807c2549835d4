"""Dense float64 tensors with reverse-mode gradients.

All model arithmetic is built from the small op set below. Ops evaluate
eagerly and record their inputs, so a computation is a DAG of `Tensor`
nodes; `backward` walks it in reverse topological order. Shapes are
explicit: the only implicit broadcast is scalar*tensor, plus the two
documented row-wise ops (`add_bias`, `scale_rows`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonScalarRootError",
    "tensor",
    "parameter",
    "matmul",
    "add",
    "sub",
    "add_bias",
    "hadamard",
    "scale_rows",
    "smul",
    "tanh",
    "sigmoid",
    "concat",
    "gather_rows",
    "sum_all",
    "cross_entropy",
    "bce_with_negatives",
    "backward",
    "AdamState",
    "adam_step",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operands of an op do not have the documented shapes."""


class NonScalarRootError(ValueError):
    """backward() was asked to differentiate a non-scalar node."""


class Tensor:
    """One node of the computation graph.

    Leaves hold data (parameters or constants); interior nodes remember
    their parents and a vjp closure mapping the output gradient to parent
    gradients. `data` is never mutated after construction.
    """

    __slots__ = ("data", "parents", "vjp", "name")

    def __init__(
        self,
        data: np.ndarray,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None,
        name: str | None = None,
    ):
        self.data = data
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    def __repr__(self) -> str:
        tag = self.name or ("leaf" if not self.parents else "op")
        return f"Tensor({tag}, dims={self.dims})"


def tensor(values, name: str | None = None) -> Tensor:
    """Wrap values as a constant leaf (row-major float64)."""
    data = np.ascontiguousarray(values, dtype=np.float64)
    if data.ndim > 2:
        raise ShapeError(f"tensor '{name}': only rank 0/1/2 supported, got {data.ndim}")
    return Tensor(data, name=name)


def parameter(values, name: str) -> Tensor:
    """Wrap values as a named parameter leaf."""
    if not name:
        raise ValueError("parameter needs a non-empty name")
    return tensor(values, name=name)


def _label(t: Tensor) -> str:
    return t.name or f"<{'x'.join(map(str, t.dims))}>"


def _require(cond: bool, op: str, msg: str, *nodes: Tensor) -> None:
    if not cond:
        names = ", ".join(_label(n) for n in nodes)
        raise ShapeError(f"{op}({names}): {msg}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: (m,k) @ (k,n) -> (m,n)."""
    _require(a.data.ndim == 2 and b.data.ndim == 2, "matmul", "both operands must be rank 2", a, b)
    _require(
        a.data.shape[1] == b.data.shape[0],
        "matmul",
        f"inner dims differ: {a.dims} vs {b.dims}",
        a,
        b,
    )

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, (a, b), vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    _require(a.data.shape == b.data.shape, op, f"shapes differ: {a.dims} vs {b.dims}", a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor(a.data - b.data, (a, b), lambda g: (g, -g))


def add_bias(m: Tensor, bias: Tensor) -> Tensor:
    """Add a length-c vector to every row of an (r,c) matrix."""
    _require(m.data.ndim == 2 and bias.data.ndim == 1, "add_bias", "need (r,c) matrix and (c,) vector", m, bias)
    _require(
        m.data.shape[1] == bias.data.shape[0],
        "add_bias",
        f"row width {m.dims[1]} != bias length {bias.dims[0]}",
        m,
        bias,
    )
    return Tensor(m.data + bias.data, (m, bias), lambda g: (g, g.sum(axis=0)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    return Tensor(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale_rows(m: Tensor, scales: Tensor) -> Tensor:
    """Multiply row i of an (r,c) matrix by scales[i]."""
    _require(m.data.ndim == 2 and scales.data.ndim == 1, "scale_rows", "need (r,c) matrix and (r,) vector", m, scales)
    _require(
        m.data.shape[0] == scales.data.shape[0],
        "scale_rows",
        f"row count {m.dims[0]} != scale length {scales.dims[0]}",
        m,
        scales,
    )
    col = scales.data[:, None]

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return g * col, (g * m.data).sum(axis=1)

    return Tensor(m.data * col, (m, scales), vjp)


def smul(s: float, a: Tensor) -> Tensor:
    """Scalar times tensor (the one permitted broadcast)."""
    s = float(s)
    return Tensor(s * a.data, (a,), lambda g: (s * g,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),))


def concat(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate vectors end to end, or matrices column-wise.

    All parts must share rank; rank-2 parts must share their row count,
    so every row of the output is the concatenation of the input rows.
    """
    parts = tuple(parts)
    _require(len(parts) >= 1, "concat", "needs at least one part")
    ndim = parts[0].data.ndim
    _require(all(p.data.ndim == ndim for p in parts), "concat", "mixed ranks", *parts)
    if ndim == 1:
        axis = 0
    elif ndim == 2:
        rows = parts[0].data.shape[0]
        _require(all(p.data.shape[0] == rows for p in parts), "concat", "row counts differ", *parts)
        axis = 1
    else:
        raise ShapeError("concat: only rank 1 or 2 supported")
    widths = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a (V,d) table: result[i] = table[indices[i]].

    `indices` is a constant int array, not a graph node; the gradient
    scatter-adds back into the table rows.
    """
    _require(table.data.ndim == 2, "gather_rows", "table must be rank 2", table)
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_rows: indices must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"gather_rows({_label(table)}): index out of range 0..{table.data.shape[0] - 1}"
        )

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return Tensor(table.data[idx], (table,), vjp)


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return (np.full(shape, float(g)),)

    return Tensor(np.asarray(a.data.sum()), (a,), vjp)


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    step_mask: np.ndarray,
    class_mask: np.ndarray,
    denom: float | None = None,
) -> Tensor:
    """Mean negative log softmax probability of each target class.

    logits: (B,M). targets: (B,) ints. step_mask: (B,) 0/1 floats picking
    the rows that contribute; masked-out rows get zero gradient. Classes
    where class_mask is False are excluded from the softmax entirely (they
    get probability 0 and no gradient), which realises the padding/unknown
    mask without -inf arithmetic. `denom` overrides the divisor so several
    calls can be summed into one mean over a larger population.
    """
    _require(logits.data.ndim == 2, "cross_entropy", "logits must be (B,M)", logits)
    b, m = logits.data.shape
    targets = np.asarray(targets)
    step_mask = np.asarray(step_mask, dtype=np.float64)
    class_mask = np.asarray(class_mask, dtype=bool)
    if targets.shape != (b,) or step_mask.shape != (b,) or class_mask.shape != (m,):
        raise ShapeError("cross_entropy: targets/step_mask/class_mask shapes do not line up")
    active = step_mask > 0.0
    if np.any(~class_mask[targets[active]]):
        raise ValueError("cross_entropy: a masked-out class appears as a target")
    count = float(active.sum()) if denom is None else float(denom)
    if count == 0.0:
        return Tensor(np.asarray(0.0), (logits,), lambda g: (np.zeros_like(logits.data),))

    neg_inf = -np.inf
    z = np.where(class_mask[None, :], logits.data, neg_inf)
    zmax = z.max(axis=1, keepdims=True)
    expz = np.exp(z - zmax)
    denom = expz.sum(axis=1, keepdims=True)
    log_denom = np.log(denom) + zmax
    nll = log_denom[:, 0] - logits.data[np.arange(b), targets]
    value = float((nll * step_mask).sum() / count)

    probs = expz / denom  # rows over allowed classes only

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        w = float(g) * step_mask / count
        grad = probs * w[:, None]
        grad[np.arange(b), targets] -= w
        return (grad,)

    return Tensor(np.asarray(value), (logits,), vjp)


def bce_with_negatives(
    logits: Tensor,
    targets: np.ndarray,
    negatives: np.ndarray,
    step_mask: np.ndarray,
    denom: float | None = None,
) -> Tensor:
    """Sampled binary objective: -log sig(z_target) - sum log(1 - sig(z_neg)).

    negatives: (B,k) ints, assumed distinct from the target per row. The
    per-row losses are averaged over rows where step_mask is nonzero, or
    over `denom` when given.
    """
    _require(logits.data.ndim == 2, "bce_with_negatives", "logits must be (B,M)", logits)
    b, _ = logits.data.shape
    targets = np.asarray(targets)
    negatives = np.asarray(negatives)
    step_mask = np.asarray(step_mask, dtype=np.float64)
    if targets.shape != (b,) or negatives.ndim != 2 or negatives.shape[0] != b:
        raise ShapeError("bce_with_negatives: targets/negatives shapes do not line up")
    active = step_mask > 0.0
    count = float(active.sum()) if denom is None else float(denom)
    if count == 0.0:
        return Tensor(np.asarray(0.0), (logits,), lambda g: (np.zeros_like(logits.data),))

    rows = np.arange(b)
    z_t = logits.data[rows, targets]
    z_n = logits.data[rows[:, None], negatives]
    # softplus(-z_t) + sum softplus(z_n), numerically stable
    per_row = np.logaddexp(0.0, -z_t) + np.logaddexp(0.0, z_n).sum(axis=1)
    value = float((per_row * step_mask).sum() / count)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        w = float(g) * step_mask / count
        grad = np.zeros_like(logits.data)
        sig_t = 1.0 / (1.0 + np.exp(-z_t))
        np.add.at(grad, (rows, targets), (sig_t - 1.0) * w)
        sig_n = 1.0 / (1.0 + np.exp(-z_n))
        np.add.at(grad, (rows[:, None], negatives), sig_n * w[:, None])
        return (grad,)

    return Tensor(np.asarray(value), (logits,), vjp)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse-postorder DFS, iterative (graphs can be thousands deep)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar root w.r.t. every named parameter.

    Parameters that the root does not depend on get zero gradients of the
    right shape, so optimizers can treat the result as total.
    """
    if root.data.shape not in ((), (1,)):
        raise NonScalarRootError(f"backward root must be scalar, got dims {root.dims}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        if node.vjp is None:
            continue  # leaves keep their accumulated gradient for the return
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg
            else:
                acc += pg
    return {
        name: grads.get(id(p), np.zeros_like(p.data)) for name, p in params.items()
    }


@dataclass
class AdamState:
    """First/second moment buffers plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, Tensor]:
    """One Adam update; returns fresh parameter tensors, mutates `state`."""
    state.t += 1
    t = state.t
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {list(g.shape)} != param '{name}' {p.dims}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        out[name] = Tensor(p.data - lr * mhat / (np.sqrt(vhat) + eps), name=name)
    return out


def finite_diff_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    name: str,
    h: float = 1e-5,
) -> float:
    """Max relative error between backward() and central differences.

    loss_fn rebuilds the scalar graph from the given parameters, so the
    check perturbs one coordinate at a time and re-runs the whole forward
    pass. Expensive by design; use small dimensions.
    """
    if not (0.0 < h <= 1e-3):
        raise ValueError(f"finite_diff_check: h must be in (0, 1e-3], got {h}")
    analytic = backward(loss_fn(params), params)[name]
    base = params[name].data
    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        bumped = dict(params)
        plus = base.copy().reshape(-1)
        plus[i] += h
        bumped[name] = Tensor(plus.reshape(base.shape), name=name)
        f_plus = float(loss_fn(bumped).data)
        minus = base.copy().reshape(-1)
        minus[i] -= h
        bumped[name] = Tensor(minus.reshape(base.shape), name=name)
        f_minus = float(loss_fn(bumped).data)
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        if err > worst:
            worst = err
    return worst
