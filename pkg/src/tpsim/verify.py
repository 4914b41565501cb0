"""Oracle checks shared by the ``verify`` command and the test-suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analytic import WorkloadShape, derived_comm_volume
from .mesh import SEQUENCE, DeviceMesh, build_mesh
from .ring_attention import run_ring_attention, serial_attention
from .tensor import SplitMix64, random_uniform
from .tp_linear import make_problem, run_linear, serial_backward, serial_forward

FORWARD_TOL = 1e-10
GRAD_REL_TOL = 1e-6
FD_STEP = 1e-5
ROWSUM_TOL = 1e-12


@dataclass(frozen=True)
class CheckResult:
    check: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.value <= self.tolerance


def half_sq_norm(y) -> float:
    return 0.5 * float(np.sum(y * y))


def finite_difference_grads(x, weights, step: float = FD_STEP):
    """Central differences of ``0.5 * ||X W_1 ... W_n||^2`` w.r.t. every input entry."""
    tensors = [x.copy(), *(w.copy() for w in weights)]

    def loss():
        return half_sq_norm(serial_forward(tensors[0], tensors[1:]))

    grads = []
    for t in tensors:
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + step
            up = loss()
            t[idx] = orig - step
            down = loss()
            t[idx] = orig
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads[0], tuple(grads[1:])


def rel_error(a, b) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def tp_checks(mesh: DeviceMesh, m: int, h: int, seeds, expansion: int = 4, scheduler: str = "threads",
              gradcheck: bool = True) -> list[CheckResult]:
    fwd_err = bwd_err = 0.0
    volume_gap = 0
    grad_err = None
    shape = WorkloadShape(b=m, s=1, h=h, r=expansion)
    for n, seed in enumerate(seeds):
        x, weights = make_problem(mesh.mode.tag, m, h, seed, expansion)
        res = run_linear(mesh, x, weights, dy="loss", scheduler=scheduler)
        y = serial_forward(x, weights)
        dx, dws = serial_backward(x, weights, y)
        fwd_err = max(fwd_err, float(np.max(np.abs(res.y - y))))
        bwd_err = max(bwd_err, float(np.max(np.abs(res.dx - dx))),
                      *(float(np.max(np.abs(a - b))) for a, b in zip(res.dweights, dws)))
        volume_gap = max(volume_gap, abs(res.total_volume - derived_comm_volume(mesh, shape)))
        if gradcheck and n == 0:
            fdx, fdws = finite_difference_grads(x, weights)
            grad_err = max(rel_error(res.dx, fdx), *(rel_error(a, b) for a, b in zip(res.dweights, fdws)))
    out = [
        CheckResult("forward_max_abs_err", fwd_err, FORWARD_TOL),
        CheckResult("backward_max_abs_err", bwd_err, FORWARD_TOL),
        CheckResult("volume_abs_gap", float(volume_gap), 0.0),
    ]
    if grad_err is not None:
        out.append(CheckResult("gradcheck_rel_err", grad_err, GRAD_REL_TOL))
    return out


def attention_checks(n: int, s: int, d_k: int, seeds, scheduler: str = "threads") -> list[CheckResult]:
    err = rowsum = 0.0
    gap = 0
    for seed in seeds:
        rng = SplitMix64(seed)
        q, k, v = (random_uniform(rng.split(), (s, d_k)) for _ in range(3))
        res = run_ring_attention(q, k, v, n, scheduler)
        err = max(err, float(np.max(np.abs(res.output - serial_attention(q, k, v)))))
        rowsum = max(rowsum, float(np.max(np.abs(res.attention.sum(axis=1) - 1.0))))
        gap = max(gap, abs(res.volume - derived_comm_volume(build_mesh(SEQUENCE, n), WorkloadShape(1, s, d_k))))
    return [
        CheckResult("attention_max_abs_err", err, FORWARD_TOL),
        CheckResult("attention_rowsum_err", rowsum, ROWSUM_TOL),
        CheckResult("volume_abs_gap", float(gap), 0.0),
    ]


def seed_stream(seed: int, count: int) -> list[int]:
    rng = SplitMix64(seed)
    return [rng.next_u64() for _ in range(count)]

