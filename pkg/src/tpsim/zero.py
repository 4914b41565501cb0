"""Zero-redundancy data parallelism (stages 1-3), fp16 buffer reuse and hybrid Adam placement.

Arithmetic is float64 throughout. Byte widths (fp16 parameters and gradients,
fp32 master weights and Adam moments) only drive the memory ledgers.

Per-step communication on ``N`` ranks with ``P`` parameters:

======= =============================================== ==============
stage   schedule                                        volume
======= =============================================== ==============
1       all-reduce grads, all-gather updated params     3 (N-1) P
2       reduce-scatter grads, all-gather updated params 2 (N-1) P
3       all-gather (fwd), all-gather (bwd),             3 (N-1) P
        reduce-scatter grads
======= =============================================== ==============
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .comm import CommLedger, Fabric, RankComm
from .errors import EmptyModel, IndivisibleLength, StageInvalid
from .memory import DEVICE, HOST, MemoryLedger
from .mesh import DATA_PARALLEL, CommGroup, build_mesh
from .tensor import SplitMix64, random_uniform


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class ByteWidths:
    param: int = 2
    grad: int = 2
    master: int = 4
    moment: int = 4

    @property
    def optimizer(self) -> int:
        """Master copy plus both Adam moments."""
        return self.master + 2 * self.moment

    @property
    def total(self) -> int:
        return self.param + self.grad + self.optimizer


def adam_update(param, grad, m, v, step: int, cfg: AdamConfig):
    """One Adam step; ``step`` counts from 1. Returns new (param, m, v)."""
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
    if cfg.bias_correction:
        m_hat = m / (1.0 - cfg.beta1**step)
        v_hat = v / (1.0 - cfg.beta2**step)
    else:
        m_hat, v_hat = m, v
    return param - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps), m, v


class QuadraticObjective:
    """Per-rank loss ``0.5 * sum(a_r * (theta - c_r)**2)`` with seeded ``a_r``, ``c_r``.

    The data-parallel gradient is the mean of the per-rank gradients.
    """

    def __init__(self, n_params: int, world_size: int, seed: int = 42):
        rng = SplitMix64(seed)
        self.world_size = world_size
        self.curvature = [random_uniform(rng.split(), (n_params,), 0.5, 2.0) for _ in range(world_size)]
        self.center = [random_uniform(rng.split(), (n_params,), -1.0, 1.0) for _ in range(world_size)]

    def loss(self, rank: int, theta) -> float:
        d = theta - self.center[rank]
        return 0.5 * float(np.sum(self.curvature[rank] * d * d))

    def grad(self, rank: int, theta) -> np.ndarray:
        return self.curvature[rank] * (theta - self.center[rank])

    def mean_grad(self, theta) -> np.ndarray:
        acc = self.grad(0, theta)
        for r in range(1, self.world_size):
            acc = acc + self.grad(r, theta)
        return acc / self.world_size


@dataclass
class TrainState:
    """One rank's view of the model data.

    ``params`` is the full vector for stages 1-2 and the owned shard for
    stage 3. Moments always cover the owned shard only.
    """

    rank: int
    stage: int
    world_size: int
    n_params: int
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    placement: str = DEVICE

    @property
    def owned(self) -> tuple[int, int]:
        c = self.n_params // self.world_size
        return self.rank * c, (self.rank + 1) * c

    def owned_params(self) -> np.ndarray:
        if self.stage == 3:
            return self.params
        lo, hi = self.owned
        return self.params[lo:hi]


def _check(stage: int, n_params: int, world_size: int):
    if stage not in (1, 2, 3):
        raise StageInvalid(f"ZeRO stage must be 1, 2 or 3, got {stage!r}")
    if n_params % world_size:
        raise IndivisibleLength(f"{n_params} parameters not divisible by {world_size} ranks")


def steady_model_bytes(stage: int, n_params: int, world_size: int, widths: ByteWidths = ByteWidths()) -> int:
    """Per-rank bytes of parameters, gradients and optimizer state between steps."""
    _check(stage, n_params, world_size)
    shard = n_params // world_size
    param = widths.param * (shard if stage == 3 else n_params)
    grad = widths.grad * (n_params if stage == 1 else shard)
    return param + grad + widths.optimizer * shard


def init_state(stage: int, rank: int, world_size: int, theta0, memory: MemoryLedger | None = None,
               widths: ByteWidths = ByteWidths()) -> TrainState:
    theta0 = np.asarray(theta0, dtype=np.float64)
    n = theta0.size
    _check(stage, n, world_size)
    c = n // world_size
    lo, hi = rank * c, (rank + 1) * c
    params = theta0[lo:hi].copy() if stage == 3 else theta0.copy()
    state = TrainState(rank, stage, world_size, n, params, np.zeros(c), np.zeros(c))
    if memory is not None:
        memory.alloc(rank, DEVICE, widths.param * params.size, "params")
        memory.alloc(rank, DEVICE, widths.grad * (n if stage == 1 else c), "grads")
        memory.alloc(rank, DEVICE, widths.optimizer * c, "optimizer")
    return state


def zero_step(comm: RankComm, group: CommGroup, state: TrainState, grads_fn, cfg: AdamConfig,
              memory: MemoryLedger | None = None, widths: ByteWidths = ByteWidths(), loss_fn=None):
    """One data-parallel training step. ``grads_fn(rank, full_params)`` gives the local gradient."""
    n, p = state.world_size, state.n_params
    lo, hi = state.owned
    rank = state.rank
    mem = memory if memory is not None else MemoryLedger()
    loss = None
    if state.stage == 3:
        gathered = widths.param * (p - (hi - lo))
        mem.alloc(rank, DEVICE, gathered, "fwd_gather")
        full = comm.all_gather(group, state.params)
        if loss_fn is not None:
            loss = loss_fn(rank, full)
        mem.free(rank, DEVICE, gathered, "fwd_gather")
        mem.alloc(rank, DEVICE, gathered, "bwd_gather")
        full = comm.all_gather(group, state.params)
    else:
        full = state.params
        if loss_fn is not None:
            loss = loss_fn(rank, full)
    grad = np.asarray(grads_fn(rank, full), dtype=np.float64)
    if state.stage == 1:
        grad_owned = comm.all_reduce(group, grad)[lo:hi] / n
    else:
        transient = widths.grad * (p - (hi - lo))
        mem.alloc(rank, DEVICE, transient, "full_grads")
        grad_owned = comm.reduce_scatter(group, grad) / n
        mem.free(rank, DEVICE, transient, "full_grads")
    if state.stage == 3:
        mem.free(rank, DEVICE, widths.param * (p - (hi - lo)), "bwd_gather")
    step = state.step + 1
    new_owned, m, v = adam_update(state.owned_params(), grad_owned, state.m, state.v, step, cfg)
    if state.stage == 3:
        params = new_owned
    else:
        params = comm.all_gather(group, new_owned)
    return TrainState(rank, state.stage, n, p, params, m, v, step), loss


@dataclass
class ZeroRun:
    stage: int
    world_size: int
    trajectory: list[np.ndarray]
    ledger: CommLedger
    memory: MemoryLedger
    model_bytes: list[int] = field(default_factory=list)

    @property
    def volume_per_step(self) -> int:
        steps = max(len(self.trajectory) - 1, 1)
        return self.ledger.total_sent() // steps


def run_zero(stage: int, world_size: int, theta0, grads_fn, steps: int, cfg: AdamConfig = AdamConfig(),
             scheduler: str = "threads", widths: ByteWidths = ByteWidths()) -> ZeroRun:
    """Train for ``steps`` steps; trajectory[t] is the gathered parameter vector after t steps."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    _check(stage, theta0.size, world_size)
    mesh = build_mesh(DATA_PARALLEL, world_size)
    memory = MemoryLedger()
    states = [init_state(stage, r, world_size, theta0, memory, widths) for r in range(world_size)]
    fabric = Fabric(world_size, scheduler)

    def program(comm):
        group = mesh.group_of(comm.rank, "data")
        st = states[comm.rank]
        history = []
        for _ in range(steps):
            st, _ = zero_step(comm, group, st, grads_fn, cfg, memory_view[comm.rank], widths)
            history.append(st.params.copy())
        return st, history

    # each rank writes to its own ledger; merged afterwards in rank order
    memory_view = [MemoryLedger() for _ in range(world_size)]
    outs = fabric.run(program)
    for view in memory_view:
        for e in view.events:
            if e.op == "alloc":
                memory.alloc(e.rank, e.device, e.nbytes, e.label)
            elif e.op == "free":
                memory.free(e.rank, e.device, e.nbytes, e.label)
    trajectory = [theta0.copy()]
    for t in range(steps):
        per_rank = [h[t] for _, h in outs]
        if stage == 3:
            trajectory.append(np.concatenate(per_rank))
        else:
            for r, arr in enumerate(per_rank[1:], start=1):
                if not np.array_equal(arr, per_rank[0]):
                    raise AssertionError(f"rank {r} parameters diverged at step {t + 1}")
            trajectory.append(per_rank[0])
    model_bytes = [memory.live(r) for r in range(world_size)]
    return ZeroRun(stage, world_size, trajectory, fabric.ledger, memory, model_bytes)


def serial_adam(theta0, grad_fn, steps: int, cfg: AdamConfig = AdamConfig()) -> list[np.ndarray]:
    theta = np.asarray(theta0, dtype=np.float64).copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    out = [theta.copy()]
    for t in range(1, steps + 1):
        theta, m, v = adam_update(theta, grad_fn(theta), m, v, t, cfg)
        out.append(theta.copy())
    return out


# -- fp16 space reuse -----------------------------------------------------


def reuse_plan(submodule_sizes, reuse_enabled: bool, param_bytes: int = 2, grad_bytes: int = 2,
               rank: int = 0) -> MemoryLedger:
    """Trace fp16 model-data bytes through one forward and backward pass.

    Forward holds every sub-module's fp16 parameters. Backward visits
    sub-modules in reverse; with reuse the gradients take over the parameter
    buffer of their sub-module, otherwise they get a buffer of their own.
    """
    sizes = list(submodule_sizes)
    if not sizes:
        raise EmptyModel("reuse_plan needs at least one sub-module")
    if any(s < 0 for s in sizes):
        raise ValueError("sub-module sizes must be non-negative")
    led = MemoryLedger()
    for n, s in enumerate(sizes):
        led.alloc(rank, DEVICE, s * param_bytes, f"fp16_params[{n}]")
    for n in range(len(sizes) - 1, -1, -1):
        s = sizes[n]
        if reuse_enabled:
            led.free(rank, DEVICE, s * param_bytes, f"fp16_params[{n}]")
            led.alloc(rank, DEVICE, s * grad_bytes, f"fp16_grads[{n}]")
        else:
            led.alloc(rank, DEVICE, s * grad_bytes, f"fp16_grads[{n}]")
    return led


# -- hybrid placement -----------------------------------------------------


@dataclass(frozen=True)
class Placement:
    tags: tuple[str, ...]
    segment_sizes: tuple[int, ...]
    bytes_per_param: int
    device_bytes: int
    host_bytes: int
    transfer_bytes: int

    def to_csv(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment", "elements", "placement", "bytes"])
        for n, (s, tag) in enumerate(zip(self.segment_sizes, self.tags)):
            w.writerow([n, s, tag, s * self.bytes_per_param])


def hybrid_place(param_segments, optimizer_bytes_per_param: int, device_budget_bytes: int,
                 param_bytes: int = 2, grad_bytes: int = 2) -> Placement:
    """Keep segments on the device in index order while their footprint fits.

    A device-resident segment costs parameters + gradients + optimizer state.
    The first segment that does not fit and every later one go to the host.
    Host-resident segments ship gradients down and updated parameters back up
    each step.
    """
    if device_budget_bytes < 0:
        raise ValueError("device budget must be non-negative")
    sizes = tuple(int(s) for s in param_segments)
    per_param = param_bytes + grad_bytes + optimizer_bytes_per_param
    used = 0
    tags = []
    spilled = False
    for s in sizes:
        cost = s * per_param
        if not spilled and used + cost <= device_budget_bytes:
            used += cost
            tags.append(DEVICE)
        else:
            spilled = True
            tags.append(HOST)
    host = sum(s for s, t in zip(sizes, tags) if t == HOST)
    return Placement(
        tuple(tags), sizes, per_param, used, host * per_param,
        host * (grad_bytes + param_bytes),
    )
