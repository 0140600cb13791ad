"""Finite-difference oracles for the differentiation engine.

The oracle side only evaluates forward values as plain numpy; it never calls
:func:`backward`.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tape, Tensor, backward, no_grad

FD_STEP = 1e-4
# Components smaller than this are compared absolutely rather than relatively.
REL_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _value(fn, arrays) -> float:
    with no_grad():
        return float(fn([Tensor(a) for a in arrays]).data)


def numerical_gradient(fn, arrays: Sequence[np.ndarray], index: int,
                       coords=None, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``fn`` with respect to ``arrays[index]``.

    ``coords`` restricts the estimate to a subset of flat positions; the
    return value then holds only those components.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index].reshape(-1)
    coords = range(target.size) if coords is None else coords
    out = []
    for c in coords:
        orig = target[c]
        target[c] = orig + h
        up = _value(fn, arrays)
        target[c] = orig - h
        down = _value(fn, arrays)
        target[c] = orig
        out.append((up - down) / (2 * h))
    return np.array(out)


def analytic_gradient(fn, arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    params = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(params)
    return [g.data for g in backward(tape, loss, params)]


def check_gradients(fn, arrays: Sequence[np.ndarray], h: float = FD_STEP,
                    max_coords: int | None = None, rng=None) -> float:
    """Largest per-component relative error between backward and central differences."""
    analytic = analytic_gradient(fn, arrays)
    worst = 0.0
    for i, a in enumerate(arrays):
        size = np.asarray(a).size
        coords = None
        if max_coords is not None and size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        numeric = numerical_gradient(fn, arrays, i, coords, h)
        got = analytic[i].reshape(-1)
        if coords is not None:
            got = got[coords]
        worst = max(worst, relative_error(got, numeric))
    return worst


def check_second_order(fn, arrays: Sequence[np.ndarray], rng, h: float = FD_STEP) -> float:
    """Compare nested backward with differences of the analytic first gradient.

    Checks the Hessian-vector product ``H v`` for a random direction ``v``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    dirs = [rng.standard_normal(a.shape) for a in arrays]

    params = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(params)
        grads = backward(tape, loss, params, create_graph=True)
        gv = None
        for g, d in zip(grads, dirs):
            term = ops.sum(ops.mul(g, Tensor(d)))
            gv = term if gv is None else gv + term
        hv = backward(tape, gv, params, allow_unused=True)

    def first_grad(shift):
        moved = [a + shift * d for a, d in zip(arrays, dirs)]
        return analytic_gradient(fn, moved)

    up, down = first_grad(h), first_grad(-h)
    worst = 0.0
    for k in range(len(arrays)):
        numeric = (up[k] - down[k]) / (2 * h)
        worst = max(worst, relative_error(hv[k].data.reshape(-1), numeric.reshape(-1), floor=1e-5))
    return worst


def grad_of_grad_check(f: Callable[[Tensor], Tensor], theta: float, dtype=np.float64):
    """First and second derivative of scalar ``f`` at ``theta`` via nested backward."""
    p = Tensor(np.array(theta, dtype=dtype), requires_grad=True)
    with Tape() as tape:
        y = f(p)
        (g,) = backward(tape, y, [p], create_graph=True)
        if g.requires_grad:
            (gg,) = backward(tape, g, [p], allow_unused=True)
            second = float(gg.data)
        else:
            second = 0.0
    return float(g.data), second


# ------------------------------------------------------------- primitive cases

def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _projected(op_fn, out_shape_rng):
    """Scalarise an op as ``sum(op(...) * R)`` with a fixed random ``R``."""
    cache = {}

    def fn(ts):
        out = op_fn(ts)
        if "R" not in cache:
            cache["R"] = out_shape_rng.standard_normal(out.shape)
        return ops.sum(ops.mul(out, Tensor(cache["R"])))

    return fn


def _case_add(rng):
    return lambda ts: ops.add(ts[0], ts[1]), [rng.standard_normal((3, 4)), rng.standard_normal((4,))]


def _case_sub(rng):
    return lambda ts: ops.sub(ts[0], ts[1]), [rng.standard_normal((2, 3)), rng.standard_normal((2, 1))]


def _case_scale(rng):
    c = float(rng.uniform(-2, 2))
    return lambda ts: ops.scale(ts[0], c), [rng.standard_normal((3, 3))]


def _case_mul(rng):
    return lambda ts: ops.mul(ts[0], ts[1]), [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]


def _case_matmul(rng):
    return lambda ts: ops.matmul(ts[0], ts[1]), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]


def _case_power(rng):
    return lambda ts: ops.power(ts[0], -0.5), [rng.uniform(0.5, 2.0, size=(5,))]


def _case_exp_log(rng):
    return lambda ts: ops.log(ops.exp(ts[0]) + 1.0), [rng.standard_normal((4,))]


def _case_relu(rng):
    return lambda ts: ops.relu(ts[0]), [_away_from_zero(rng, (3, 5))]


def _case_reshape(rng):
    return lambda ts: ops.reshape(ts[0], (6, 2)), [rng.standard_normal((3, 4))]


def _case_transpose(rng):
    return lambda ts: ops.transpose(ts[0], (1, 2, 0)), [rng.standard_normal((2, 3, 4))]


def _case_reductions(rng):
    def fn(ts):
        x = ts[0]
        return ops.add(ops.sum(x, axis=1, keepdims=True), ops.mean(x, axis=0))
    return fn, [rng.standard_normal((3, 3))]


def _case_conv2d(rng):
    return lambda ts: ops.conv2d(ts[0], ts[1]), [rng.standard_normal((2, 4, 4, 2)),
                                                 rng.standard_normal((3, 2, 3, 3))]


def _case_batch_norm(rng):
    return (lambda ts: ops.batch_norm(ts[0], ts[1], ts[2]),
            [rng.standard_normal((3, 2, 2, 2)), rng.uniform(0.5, 1.5, size=(2,)), rng.standard_normal((2,))])


def _case_max_pool(rng):
    # Distinct values spaced well beyond the step avoid ties within a window.
    vals = rng.permutation(2 * 4 * 4 * 2).astype(np.float64) * 0.01
    return lambda ts: ops.max_pool2d(ts[0]), [vals.reshape(2, 4, 4, 2)]


def _case_log_softmax(rng):
    return lambda ts: ops.log_softmax(ts[0]), [rng.standard_normal((3, 4))]


def _case_cross_entropy(rng):
    labels = rng.integers(0, 4, size=3)
    return lambda ts: ops.cross_entropy(ts[0], labels), [rng.standard_normal((3, 4))]


PRIMITIVE_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "scale": _case_scale,
    "mul": _case_mul,
    "matmul": _case_matmul,
    "power": _case_power,
    "exp_log": _case_exp_log,
    "relu": _case_relu,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "reductions": _case_reductions,
    "conv2d": _case_conv2d,
    "batch_norm": _case_batch_norm,
    "max_pool2d": _case_max_pool,
    "log_softmax": _case_log_softmax,
    "cross_entropy": _case_cross_entropy,
}


def primitive_case(name: str, seed: int):
    rng = np.random.default_rng(seed)
    op_fn, arrays = PRIMITIVE_CASES[name](rng)
    return _projected(op_fn, np.random.default_rng(seed + 1_000_003)), arrays


@dataclass
class CaseResult:
    name: str
    seed: int
    order: int
    error: float


def run_primitive_suite(seeds: Sequence[int], second_order: bool = True) -> list[CaseResult]:
    results = []
    for name in PRIMITIVE_CASES:
        for seed in seeds:
            fn, arrays = primitive_case(name, seed)
            results.append(CaseResult(name, seed, 1, check_gradients(fn, arrays)))
            if second_order:
                err = check_second_order(fn, arrays, np.random.default_rng(seed + 7))
                results.append(CaseResult(name, seed, 2, err))
    return results
