"""MAML meta-training with optional learned per-layer, per-step inner rates.

The inner loop adapts a copy of the shared parameters ``theta`` to one task's
support set; the outer loop differentiates the adapted model's query loss back
to ``theta`` (and to the rate table) through the recorded inner updates.
"""

from __future__ import annotations

import dataclasses
import json
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .data import EpisodeSpec, sample_episode
from .tensor_core import NonFiniteError, ParamSet, ShapeError, Tape, Tensor, active_tape, backward, no_grad, ops

OPTIMIZERS = ("adam", "rmsprop", "sgd")
LR_MODES = ("fixed", "learnable")
ORDERS = ("second", "first")
DEFAULT_RATE = 0.01


class AdaptationError(RuntimeError):
    """Inner-loop adaptation produced a non-finite loss."""


class LeakageError(ValueError):
    """Meta-test classes overlap the meta-training classes."""


@dataclass
class MetaConfig:
    inner_steps: int = 1
    inner_lr_mode: str = "learnable"
    alpha: float = DEFAULT_RATE  # fixed rate, or the table's initial value
    outer_optimizer: str = "adam"
    outer_lr: float = 0.001
    meta_batch: int = 25
    iterations: int = 1500
    order: str = "second"
    seed: int = 0
    test_inner_steps: int | None = None  # None: same as inner_steps
    lr_clamp: float | None = None  # lower bound on learned rates, off by default
    freeze_lr: bool = False  # learnable table with gradient flow cut
    threads: int = 1

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.outer_lr > 0:
            raise ValueError("outer_lr must be > 0")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.test_inner_steps is not None and self.test_inner_steps < 1:
            raise ValueError("test_inner_steps must be >= 1")
        for name, value, allowed in (("inner_lr_mode", self.inner_lr_mode, LR_MODES),
                                     ("outer_optimizer", self.outer_optimizer, OPTIMIZERS),
                                     ("order", self.order, ORDERS)):
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")

    @property
    def learns_rates(self) -> bool:
        return self.inner_lr_mode == "learnable" and not self.freeze_lr

    @property
    def eval_steps(self) -> int:
        return self.test_inner_steps or self.inner_steps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MetaConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown MetaConfig fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class InnerLRTable:
    """One inner learning rate per parameter entry and inner step."""

    names: tuple[str, ...]
    rates: np.ndarray  # [len(names), steps]

    def __post_init__(self):
        self.names = tuple(self.names)
        self.rates = np.array(self.rates)
        if self.rates.shape[0] != len(self.names) or self.rates.ndim != 2:
            raise ShapeError("InnerLRTable", f"rates {list(self.rates.shape)} for {len(self.names)} entries")
        if not np.isfinite(self.rates).all():
            raise ValueError("inner learning rates must be finite")

    @classmethod
    def filled(cls, names, steps: int, value: float = DEFAULT_RATE, dtype=np.float32) -> InnerLRTable:
        return cls(tuple(names), np.full((len(names), steps), value, dtype=dtype))

    @property
    def steps(self) -> int:
        return self.rates.shape[1]

    def column(self, step: int) -> int:
        # Adaptation longer than the table reuses its last column.
        return min(step, self.steps - 1)

    def leaves(self, requires_grad: bool) -> list[list[Tensor]]:
        return [[Tensor(self.rates[i, s].copy(), requires_grad=requires_grad) for s in range(self.steps)]
                for i in range(len(self.names))]

    def copy(self) -> InnerLRTable:
        return InnerLRTable(self.names, self.rates.copy())


@dataclass
class AdaptResult:
    phi: ParamSet
    support_loss_trace: list[float]
    query_loss: float | None = None
    query_accuracy: float | None = None


LossFn = Callable[[ParamSet, object, object], Tensor]


def model_loss(params: ParamSet, x, y) -> Tensor:
    return mdl.loss(mdl.forward(params, x), y)


def _rate_lookup(lr, names, steps):
    """Return ``rate(i, s)`` giving a float or a scalar tensor."""
    if isinstance(lr, (int, float, np.floating)):
        value = float(lr)
        return lambda i, s: value
    if isinstance(lr, InnerLRTable):
        if lr.names != tuple(names):
            raise ShapeError("inner_adapt", "rate table entries do not match the parameters")
        return lambda i, s: float(lr.rates[i, lr.column(s)])
    grid = lr  # nested list [entry][step] of scalar tensors
    if len(grid) != len(names):
        raise ShapeError("inner_adapt", f"{len(grid)} rate rows for {len(names)} parameters")
    return lambda i, s: grid[i][min(s, len(grid[i]) - 1)]


def _step(p: Tensor, g: Tensor, rate) -> Tensor:
    if isinstance(rate, Tensor):
        return ops.sub(p, ops.mul(g, rate))
    return ops.sub(p, ops.scale(g, rate))


def inner_adapt(theta: ParamSet, support_x, support_y, lr, steps: int, tape: Tape | None = None,
                track_for_meta: bool = True, first_order: bool = False,
                loss_fn: LossFn = model_loss) -> AdaptResult:
    """Run ``steps`` gradient-descent updates of ``theta`` on the support set.

    ``lr`` is a fixed float, an :class:`InnerLRTable` (values only), or a
    grid of scalar tensors from :meth:`InnerLRTable.leaves` whose entries get
    meta-gradients. With ``track_for_meta`` the updates are recorded on
    ``tape`` so the result stays differentiable in ``theta``; ``first_order``
    then treats each support gradient as a constant. Without it, adaptation
    runs on detached copies and ``theta`` is never touched.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rate = _rate_lookup(lr, theta.names, steps)
    trace: list[float] = []
    if track_for_meta:
        tape = tape if tape is not None else active_tape()
        if tape is None:
            raise ValueError("inner_adapt: track_for_meta needs a tape")
        phi = theta
    else:
        phi = theta.detached(requires_grad=True)

    for s in range(steps):
        try:
            if track_for_meta:
                with tape:
                    ls = loss_fn(phi, support_x, support_y)
                grads = backward(tape, ls, phi, create_graph=not first_order)
                with tape:
                    phi = phi.with_tensors(_step(p, g, rate(i, s))
                                           for i, (p, g) in enumerate(zip(phi.values(), grads.values())))
            else:
                with Tape() as local:
                    ls = loss_fn(phi, support_x, support_y)
                grads = backward(local, ls, phi)
                updated = []
                for i, (p, g) in enumerate(zip(phi.values(), grads.values())):
                    r = rate(i, s)
                    r = float(r.data) if isinstance(r, Tensor) else r
                    updated.append(Tensor(p.data - g.data * p.dtype.type(r), requires_grad=True))
                phi = phi.with_tensors(updated)
        except NonFiniteError as exc:
            raise AdaptationError(f"inner step {s + 1}/{steps}: non-finite values ({exc}); "
                                  f"support losses so far {trace}") from None
        trace.append(float(ls.data))
    return AdaptResult(phi, trace)


# --------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


ADAM_BETAS = (0.9, 0.999)
RMS_DECAY = 0.9
OPT_EPS = 1e-8


def outer_optimizer_step(kind: str, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                         state: OptimizerState | None, lr: float):
    """One SGD, RMSprop or Adam update; returns new arrays and a new state."""
    if kind not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {kind!r}")
    if set(params) != set(grads):
        raise ValueError("gradients are not aligned with parameters")
    state = state or OptimizerState(kind)
    if state.kind != kind:
        raise ValueError(f"optimizer state is for {state.kind!r}, not {kind!r}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError("optimizer", f"{name}: gradient {list(grads[name].shape)} vs parameter {list(p.shape)}")
        for moments in (state.m, state.v):
            if name in moments and moments[name].shape != p.shape:
                raise ShapeError("optimizer", f"{name}: state {list(moments[name].shape)} vs parameter {list(p.shape)}")

    t = state.step + 1
    new_m, new_v, out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        dt = p.dtype.type
        if kind == "sgd":
            out[name] = p - dt(lr) * g
        elif kind == "rmsprop":
            v = state.v.get(name, np.zeros_like(p))
            v = dt(RMS_DECAY) * v + dt(1 - RMS_DECAY) * g * g
            out[name] = p - dt(lr) * g / (np.sqrt(v) + dt(OPT_EPS))
            new_v[name] = v
        else:
            b1, b2 = ADAM_BETAS
            m = dt(b1) * state.m.get(name, np.zeros_like(p)) + dt(1 - b1) * g
            v = dt(b2) * state.v.get(name, np.zeros_like(p)) + dt(1 - b2) * g * g
            m_hat = m / dt(1 - b1 ** t)
            v_hat = v / dt(1 - b2 ** t)
            out[name] = p - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(OPT_EPS))
            new_m[name], new_v[name] = m, v
    return out, OptimizerState(kind, t, new_m, new_v)


# ----------------------------------------------------------------- meta step

@dataclass
class TaskGradient:
    theta: list[np.ndarray]
    rates: np.ndarray | None
    query_loss: float
    query_accuracy: float | None


@dataclass
class StepDiagnostics:
    query_loss_sum: float
    query_loss: float  # mean over tasks
    query_accuracy: float | None
    grads: dict[str, np.ndarray]
    rate_grad: np.ndarray | None


def _task_arrays(task):
    return task.support_x, task.support_y, task.query_x, task.query_y


def task_meta_gradient(theta: ParamSet, lr_table: InnerLRTable, task, cfg: MetaConfig,
                       loss_fn: LossFn = model_loss, accuracy_fn=None) -> TaskGradient:
    """Meta-gradient of one task's post-adaptation query loss."""
    sx, sy, qx, qy = _task_arrays(task)
    if cfg.inner_lr_mode == "fixed":
        lr, rate_leaves = cfg.alpha, None
    else:
        rate_leaves = lr_table.leaves(requires_grad=cfg.learns_rates)
        lr = rate_leaves
    with Tape() as tape:
        res = inner_adapt(theta, sx, sy, lr, cfg.inner_steps, tape, track_for_meta=True,
                          first_order=cfg.order == "first", loss_fn=loss_fn)
        if loss_fn is model_loss:
            logits = mdl.forward(res.phi, qx)
            lq = mdl.loss(logits, qy)
            acc = mdl.accuracy(logits, qy)
        else:
            lq = loss_fn(res.phi, qx, qy)
            acc = accuracy_fn(res.phi, qx, qy) if accuracy_fn else None
    wrt = list(theta.values())
    if cfg.learns_rates:
        wrt += [t for row in rate_leaves for t in row]
    grads = backward(tape, lq, wrt)
    theta_grads = [g.data for g in grads[:len(theta)]]
    rate_grad = None
    if cfg.learns_rates:
        rate_grad = np.array([g.data for g in grads[len(theta):]],
                             dtype=lr_table.rates.dtype).reshape(lr_table.rates.shape)
    return TaskGradient(theta_grads, rate_grad, float(lq.data), acc)


def meta_step(theta: ParamSet, lr_table: InnerLRTable, tasks: Sequence, cfg: MetaConfig,
              opt_state: OptimizerState | None, loss_fn: LossFn = model_loss, accuracy_fn=None,
              check_batch: bool = True):
    """Sum per-task meta-gradients and apply the outer optimizer.

    Returns ``(theta', lr_table', opt_state', diagnostics)``. Per-task work
    may run on ``cfg.threads`` threads; gradients are always reduced in task
    order.
    """
    if check_batch and len(tasks) != cfg.meta_batch:
        raise ValueError(f"meta_step expects {cfg.meta_batch} tasks, got {len(tasks)}")

    def one(task):
        return task_meta_gradient(theta, lr_table, task, cfg, loss_fn, accuracy_fn)

    if cfg.threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(one, tasks))
    else:
        results = [one(t) for t in tasks]

    total = [r.copy() for r in results[0].theta]
    for r in results[1:]:
        for acc, g in zip(total, r.theta):
            acc += g
    grads = dict(zip(theta.names, total))
    rate_grad = None
    if cfg.learns_rates:
        rate_grad = results[0].rates.copy()
        for r in results[1:]:
            rate_grad += r.rates

    params = {n: t.data for n, t in theta.items()}
    step_grads = dict(grads)
    if rate_grad is not None:
        params["inner_lr"] = lr_table.rates
        step_grads["inner_lr"] = rate_grad
    new, opt_state = outer_optimizer_step(cfg.outer_optimizer, params, step_grads, opt_state, cfg.outer_lr)
    new_theta = theta.with_tensors(Tensor(new[n], requires_grad=True) for n in theta.names)
    new_table = lr_table
    if rate_grad is not None:
        rates = new["inner_lr"]
        if cfg.lr_clamp is not None:
            rates = np.maximum(rates, rates.dtype.type(cfg.lr_clamp))
        new_table = InnerLRTable(lr_table.names, rates)

    losses = [r.query_loss for r in results]
    accs = [r.query_accuracy for r in results]
    diag = StepDiagnostics(float(np.sum(losses)), float(np.mean(losses)),
                           None if accs[0] is None else float(np.mean(accs)), grads, rate_grad)
    return new_theta, new_table, opt_state, diag


# ----------------------------------------------------------- train and test

@dataclass
class TrainResult:
    theta: ParamSet
    lr_table: InnerLRTable
    curve: list[dict]


def curve_line(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"))


def init_state(cfg: MetaConfig, n_way: int, dtype=np.float32):
    spec = mdl.ModelSpec(num_ways=n_way)
    theta = mdl.init_params(spec, seed=[cfg.seed, 0], dtype=dtype)
    table = InnerLRTable.filled(theta.names, cfg.inner_steps, cfg.alpha, dtype=dtype)
    return theta, table


def episode_seed(master: int, stream: int, *counters: int) -> list[int]:
    """Seed for one episode, split from ``master`` by stream and counters."""
    return [int(master), int(stream), *(int(c) for c in counters)]


TRAIN_STREAM, TEST_STREAM = 1, 2


def meta_train(cfg: MetaConfig, train_pools, spec: EpisodeSpec, theta: ParamSet | None = None,
               lr_table: InnerLRTable | None = None, on_record: Callable[[dict], None] | None = None,
               should_stop: Callable[[], None] | None = None) -> TrainResult:
    """Run ``cfg.iterations`` meta-steps on freshly sampled episodes.

    Episode ``j`` of iteration ``i`` is drawn with seed
    ``(cfg.seed, TRAIN_STREAM, i, j)``, so a run is fully determined by its
    configuration. ``on_record`` receives each curve record as it is made;
    ``should_stop`` is polled once per iteration and may raise.
    """
    if theta is None:
        theta, fresh = init_state(cfg, spec.n_way)
        lr_table = lr_table or fresh
    elif lr_table is None:
        lr_table = InnerLRTable.filled(theta.names, cfg.inner_steps, cfg.alpha, dtype=theta["fc.weight"].dtype)
    curve = []
    opt_state = None
    for it in range(cfg.iterations):
        if should_stop is not None:
            should_stop()
        tasks = [sample_episode(train_pools, spec, episode_seed(cfg.seed, TRAIN_STREAM, it, j))
                 for j in range(cfg.meta_batch)]
        theta, lr_table, opt_state, diag = meta_step(theta, lr_table, tasks, cfg, opt_state)
        record = {"iter": it + 1, "query_loss": diag.query_loss, "query_acc": diag.query_accuracy,
                  "lr_table": [[float(v) for v in row] for row in lr_table.rates]}
        curve.append(record)
        if on_record is not None:
            on_record(record)
    return TrainResult(theta, lr_table, curve)


@dataclass
class MetaTestResult:
    mean: float
    std: float
    accuracies: list[float]
    episodes: list[dict]


def sample_std(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


def audit_labels(train_labels, test_labels) -> None:
    overlap = sorted(set(train_labels) & set(test_labels))
    if overlap:
        raise LeakageError(f"meta-test classes {overlap} also appear in meta-training")


def meta_test(theta: ParamSet, lr_table: InnerLRTable, test_pools, spec: EpisodeSpec, episodes: int,
              shots: int, seed: int, inner_steps: int | None = None, train_labels=(),
              stream: int = TEST_STREAM) -> MetaTestResult:
    """Adapt to ``episodes`` fresh test tasks and score each on its query set.

    ``theta`` and ``lr_table`` are read only; adaptation works on copies.
    Query batch-norm statistics are taken over the whole query set.
    """
    audit_labels(train_labels, spec.class_pool)
    ways = theta["fc.weight"].shape[1]
    if ways != spec.n_way:
        raise ShapeError("meta_test", f"model has {ways} output classes but the episodes are {spec.n_way}-way")
    steps = inner_steps or lr_table.steps
    spec = dataclasses.replace(spec, k_shot=shots)
    accs, records = [], []
    for e in range(episodes):
        ep = sample_episode(test_pools, spec, episode_seed(seed, stream, e))
        res = inner_adapt(theta, ep.support_x, ep.support_y, lr_table, steps, track_for_meta=False)
        with no_grad():
            logits = mdl.forward(res.phi, ep.query_x)
        acc = mdl.accuracy(logits, ep.query_y)
        accs.append(acc)
        records.append({"episode": e, "classes": list(ep.classes), "shots": shots,
                        "queries": int(ep.query_y.size), "accuracy": acc})
    return MetaTestResult(float(np.mean(accs)) if accs else float("nan"), sample_std(accs), accs, records)
