"""Distributed linear layers for 1D, 2D, 2.5D and 3D tensor parallelism.

Activations are 2D matrices ``[M, H]`` with ``M = b * s``. The rank-level
procedures (``*_forward`` / ``*_backward``) run inside a fabric program and
only see their local blocks; :func:`run_linear` shards global tensors, runs a
forward and a backward program and gathers the results for checking.

Schedules:

* 1D: Megatron MLP ``Y = X W1 W2``; ``W1`` split by columns, ``W2`` by rows,
  one all-reduce of the partial ``Y`` (and one of ``dX`` in backward).
* 2D: SUMMA on a ``j x j`` mesh: per step, broadcast an ``X`` block along the
  row and a ``W`` block along the column. Backward uses broadcast + reduce.
* 2.5D: ``d`` independent SUMMA planes over batch slabs; weights replicated
  across depth, weight gradients all-reduced over the depth axis.
* 3D: all-gather ``X`` along rows, all-gather ``W`` along depth, local
  product, reduce-scatter ``Y`` along columns; backward mirrors it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .comm import CommLedger, Fabric, RankComm
from .errors import IndivisibleDim, ShapeMismatch
from .mesh import DeviceMesh, Mode
from .tensor import SplitMix64, matmul, random_uniform, transpose

# -- layouts --------------------------------------------------------------


def _grid(layout: str, mesh: DeviceMesh) -> tuple[int, int]:
    dims = mesh.dims
    if layout == "replicated":
        return 1, 1
    if layout == "1d_col":
        return 1, mesh.world_size
    if layout == "1d_row":
        return mesh.world_size, 1
    if layout == "2d":
        return dims[0], dims[1]
    if layout == "2.5d_act":
        d, k, _ = dims
        return d * k, k
    if layout == "2.5d_weight":
        return dims[1], dims[2]
    if layout in ("3d_x", "3d_w", "3d_y"):
        l = dims[0]
        return l * l, l
    raise ValueError(f"unknown layout {layout!r}")


def _block_index(layout: str, mesh: DeviceMesh, rank: int) -> tuple[int, int]:
    c = mesh.coords(rank)
    if layout == "replicated":
        return 0, 0
    if layout == "1d_col":
        return 0, rank
    if layout == "1d_row":
        return rank, 0
    if layout == "2d":
        return c[0], c[1]
    if layout == "2.5d_act":
        k = mesh.dims[1]
        return c[0] * k + c[1], c[2]
    if layout == "2.5d_weight":
        return c[1], c[2]
    l = mesh.dims[0]
    i, j, k = c
    if layout == "3d_x":
        return i * l + k, j
    if layout == "3d_w":
        return j * l + i, k
    if layout == "3d_y":
        return i * l + j, k
    raise ValueError(f"unknown layout {layout!r}")


@dataclass(frozen=True)
class ShardSpec:
    """How a global ``[P, Q]`` tensor is cut into per-rank blocks."""

    mesh: DeviceMesh
    global_shape: tuple[int, int]
    layout: str

    def __post_init__(self):
        nr, nc = self.grid
        P, Q = self.global_shape
        if P % nr or Q % nc:
            raise IndivisibleDim(
                f"{self.layout} layout on mesh {self.mesh.dims} needs shape divisible by "
                f"({nr}, {nc}), got {self.global_shape}"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return _grid(self.layout, self.mesh)

    @property
    def block_shape(self) -> tuple[int, int]:
        nr, nc = self.grid
        return self.global_shape[0] // nr, self.global_shape[1] // nc

    def block_index(self, rank: int) -> tuple[int, int]:
        return _block_index(self.layout, self.mesh, rank)

    def block_slices(self, rank: int) -> tuple[slice, slice]:
        bi, bj = self.block_index(rank)
        br, bc = self.block_shape
        return slice(bi * br, (bi + 1) * br), slice(bj * bc, (bj + 1) * bc)


@dataclass
class ShardedTensor:
    spec: ShardSpec
    rank: int
    local: np.ndarray

    def __post_init__(self):
        if self.local.shape != self.spec.block_shape:
            raise ShapeMismatch(
                f"rank {self.rank}: local block {self.local.shape} != {self.spec.block_shape}"
            )


def shard(tensor: np.ndarray, spec: ShardSpec) -> list[ShardedTensor]:
    if tuple(tensor.shape) != tuple(spec.global_shape):
        raise ShapeMismatch(f"tensor {tensor.shape} does not match spec {spec.global_shape}")
    return [
        ShardedTensor(spec, r, tensor[spec.block_slices(r)].copy())
        for r in range(spec.mesh.world_size)
    ]


def gather_full(shards: list[ShardedTensor]) -> np.ndarray:
    """Reassemble the global tensor from every rank's block.

    Host-side and outside any fabric, so it never touches a comm ledger.
    Replicated blocks must agree bit for bit.
    """
    if not shards:
        raise ShapeMismatch("no shards to gather")
    spec = shards[0].spec
    out = np.full(spec.global_shape, np.nan)
    seen = np.zeros(spec.global_shape, dtype=bool)
    for st in shards:
        if st.spec != spec:
            raise ShapeMismatch("shards carry different specs")
        if st.local.shape != spec.block_shape:
            raise ShapeMismatch(f"rank {st.rank} block {st.local.shape} != {spec.block_shape}")
        sl = spec.block_slices(st.rank)
        if seen[sl].any():
            if not np.array_equal(out[sl], st.local):
                raise ValueError(f"replicas of block {spec.block_index(st.rank)} disagree")
        out[sl] = st.local
        seen[sl] = True
    if not seen.all():
        raise ShapeMismatch("shards do not cover the global tensor")
    return out


def layouts_for(mode: Mode) -> dict[str, str]:
    """Layout of each tensor role (x, y, and the weights) for a mode."""
    if mode is Mode.ONE_D:
        return {"x": "replicated", "y": "replicated", "w1": "1d_col", "w2": "1d_row"}
    if mode is Mode.TWO_D:
        return {"x": "2d", "y": "2d", "w": "2d"}
    if mode is Mode.TWO_POINT_FIVE_D:
        return {"x": "2.5d_act", "y": "2.5d_act", "w": "2.5d_weight"}
    if mode is Mode.THREE_D:
        return {"x": "3d_x", "y": "3d_y", "w": "3d_w"}
    raise ValueError(f"{mode} is not a tensor-parallel mode")


# -- 1D -------------------------------------------------------------------


def linear1d_forward(comm: RankComm, mesh: DeviceMesh, x, w1, w2):
    group = mesh.group_of(comm.rank, "ring")
    z = matmul(x, w1)
    y = comm.all_reduce(group, matmul(z, w2))
    return y, (x, z, w1, w2)


def linear1d_backward(comm: RankComm, mesh: DeviceMesh, dy, cache):
    x, z, w1, w2 = cache
    if dy.shape != (x.shape[0], w2.shape[1]):
        raise ShapeMismatch(f"dY {dy.shape} inconsistent with forward output")
    group = mesh.group_of(comm.rank, "ring")
    dw2 = matmul(transpose(z), dy)
    dz = matmul(dy, transpose(w2))
    dw1 = matmul(transpose(x), dz)
    dx = comm.all_reduce(group, matmul(dz, transpose(w1)))
    return dx, dw1, dw2


# -- 2D / 2.5D ------------------------------------------------------------


def _plane(comm: RankComm, mesh: DeviceMesh):
    c = mesh.coords(comm.rank)
    return (
        mesh.group_of(comm.rank, "row"),
        mesh.group_of(comm.rank, "column"),
        c[-2],
        c[-1],
        mesh.dims[-1],
    )


def _summa(comm, row, col, i, c, j, x, w):
    y = None
    for t in range(j):
        xb = comm.broadcast(row, row.ranks[t], x if c == t else None)
        wb = comm.broadcast(col, col.ranks[t], w if i == t else None)
        part = matmul(xb, wb)
        y = part if y is None else y + part
    return y


def _summa_backward(comm, row, col, i, c, j, dy, x, w):
    dx = dw = None
    for t in range(j):
        # dX[i,t] = sum_c dY[i,c] W[t,c]^T, reduced onto (i, t)
        wb = comm.broadcast(col, col.ranks[t], w if i == t else None)
        part = comm.reduce(row, row.ranks[t], matmul(dy, transpose(wb)))
        if c == t:
            dx = part
    for t in range(j):
        # dW[t,c] = sum_i X[i,t]^T dY[i,c], reduced onto (t, c)
        xb = comm.broadcast(row, row.ranks[t], x if c == t else None)
        part = comm.reduce(col, col.ranks[t], matmul(transpose(xb), dy))
        if i == t:
            dw = part
    return dx, dw


def summa2d_forward(comm: RankComm, mesh: DeviceMesh, x, w):
    row, col, i, c, j = _plane(comm, mesh)
    return _summa(comm, row, col, i, c, j, x, w), (x, w)


def summa2d_backward(comm: RankComm, mesh: DeviceMesh, dy, cache):
    x, w = cache
    row, col, i, c, j = _plane(comm, mesh)
    return _summa_backward(comm, row, col, i, c, j, dy, x, w)


def summa2p5d_forward(comm: RankComm, mesh: DeviceMesh, x, w):
    row, col, i, c, k = _plane(comm, mesh)
    return _summa(comm, row, col, i, c, k, x, w), (x, w)


def summa2p5d_backward(comm: RankComm, mesh: DeviceMesh, dy, cache):
    x, w = cache
    row, col, i, c, k = _plane(comm, mesh)
    dx, dw = _summa_backward(comm, row, col, i, c, k, dy, x, w)
    dw = comm.all_reduce(mesh.group_of(comm.rank, "depth"), dw)
    return dx, dw


# -- 3D -------------------------------------------------------------------


def matmul3d_forward(comm: RankComm, mesh: DeviceMesh, x, w):
    x_full = comm.all_gather(mesh.group_of(comm.rank, "row"), x)
    w_full = comm.all_gather(mesh.group_of(comm.rank, "depth"), w)
    y = comm.reduce_scatter(mesh.group_of(comm.rank, "column"), matmul(x_full, w_full))
    return y, (x_full, w_full)


def matmul3d_backward(comm: RankComm, mesh: DeviceMesh, dy, cache):
    x_full, w_full = cache
    dy_full = comm.all_gather(mesh.group_of(comm.rank, "column"), dy)
    dx = comm.reduce_scatter(mesh.group_of(comm.rank, "row"), matmul(dy_full, transpose(w_full)))
    dw = comm.reduce_scatter(mesh.group_of(comm.rank, "depth"), matmul(transpose(x_full), dy_full))
    return dx, dw


_PROCS = {
    Mode.TWO_D: (summa2d_forward, summa2d_backward),
    Mode.TWO_POINT_FIVE_D: (summa2p5d_forward, summa2p5d_backward),
    Mode.THREE_D: (matmul3d_forward, matmul3d_backward),
}


# -- drivers --------------------------------------------------------------


@dataclass
class LinearResult:
    y: np.ndarray
    dx: np.ndarray | None
    dweights: tuple[np.ndarray, ...] | None
    forward_ledger: CommLedger
    backward_ledger: CommLedger = field(default_factory=CommLedger)
    local_shapes: dict[str, list[tuple[int, int]]] = field(default_factory=dict)

    @property
    def forward_volume(self) -> int:
        return self.forward_ledger.total_sent()

    @property
    def backward_volume(self) -> int:
        return self.backward_ledger.total_sent()

    @property
    def total_volume(self) -> int:
        return self.forward_volume + self.backward_volume

    def volume_by_axis(self) -> dict[str, int]:
        out = dict(self.forward_ledger.by_axis())
        for axis, v in self.backward_ledger.by_axis().items():
            out[axis] = out.get(axis, 0) + v
        return dict(sorted(out.items()))


def serial_forward(x, weights):
    y = x
    for w in weights:
        y = matmul(y, w)
    return y


def serial_backward(x, weights, dy):
    """Chain rule for ``Y = X W_1 ... W_n``; returns (dX, (dW_1, ..., dW_n))."""
    acts = [x]
    for w in weights[:-1]:
        acts.append(matmul(acts[-1], w))
    grads = [None] * len(weights)
    g = dy
    for n in range(len(weights) - 1, -1, -1):
        grads[n] = matmul(transpose(acts[n]), g)
        g = matmul(g, transpose(weights[n]))
    return g, tuple(grads)


def make_problem(mode: Mode, m: int, h: int, seed: int, expansion: int = 4):
    """Seeded global ``X`` and weights: ``(W1 [h, r h], W2 [r h, h])`` for 1D, ``(W [h, h],)`` otherwise."""
    rng = SplitMix64(seed)
    x = random_uniform(rng.split(), (m, h))
    if mode is Mode.ONE_D:
        r = expansion * h
        return x, (random_uniform(rng.split(), (h, r)), random_uniform(rng.split(), (r, h)))
    return x, (random_uniform(rng.split(), (h, h)),)


def run_linear(
    mesh: DeviceMesh,
    x: np.ndarray,
    weights,
    dy: np.ndarray | str | None = "loss",
    scheduler: str = "threads",
) -> LinearResult:
    """Shard, run forward (and backward) on the fabric, gather.

    ``dy="loss"`` back-propagates the loss ``0.5 * ||Y||^2`` (so ``dY = Y``);
    ``dy=None`` skips the backward pass.
    """
    mode = mesh.mode.tag
    lay = layouts_for(mode)
    p = mesh.world_size
    weights = tuple(weights)
    if mode is Mode.ONE_D:
        if len(weights) != 2:
            raise ShapeMismatch("1D expects two weights (W1, W2)")
        w1, w2 = weights
        if x.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
            raise ShapeMismatch(f"incompatible shapes {x.shape}, {w1.shape}, {w2.shape}")
        out_shape = (x.shape[0], w2.shape[1])
        xs = shard(x, ShardSpec(mesh, x.shape, lay["x"]))
        ws = [shard(w1, ShardSpec(mesh, w1.shape, lay["w1"])), shard(w2, ShardSpec(mesh, w2.shape, lay["w2"]))]
        fwd, bwd = linear1d_forward, linear1d_backward
        wspecs = [ws[0][0].spec, ws[1][0].spec]
    else:
        if len(weights) != 1:
            raise ShapeMismatch(f"{mesh.mode} expects one weight")
        (w,) = weights
        if x.shape[1] != w.shape[0]:
            raise ShapeMismatch(f"incompatible shapes {x.shape}, {w.shape}")
        out_shape = (x.shape[0], w.shape[1])
        xs = shard(x, ShardSpec(mesh, x.shape, lay["x"]))
        ws = [shard(w, ShardSpec(mesh, w.shape, lay["w"]))]
        fwd, bwd = _PROCS[mode]
        wspecs = [ws[0][0].spec]
        if mode is Mode.THREE_D:
            # the reduce-scatter / gather pairs need l^2 | out rows and l | out cols
            ShardSpec(mesh, out_shape, lay["y"])
    yspec = ShardSpec(mesh, out_shape, lay["y"])

    fwd_fabric = Fabric(p, scheduler)
    fwd_out = fwd_fabric.run(
        lambda comm: fwd(comm, mesh, xs[comm.rank].local, *(wl[comm.rank].local for wl in ws))
    )
    y_shards = [ShardedTensor(yspec, r, out[0]) for r, out in enumerate(fwd_out)]
    y = gather_full(y_shards)
    shapes = {
        "x": [s.local.shape for s in xs],
        "y": [s.local.shape for s in y_shards],
        **{f"w{n}": [s.local.shape for s in wl] for n, wl in enumerate(ws)},
    }
    result = LinearResult(y, None, None, fwd_fabric.ledger, local_shapes=shapes)
    if dy is None:
        return result
    if isinstance(dy, str):
        if dy != "loss":
            raise ValueError(f"dy must be an array, 'loss' or None, got {dy!r}")
        dy = y
    dys = shard(np.asarray(dy, dtype=np.float64), yspec)
    bwd_fabric = Fabric(p, scheduler)
    bwd_out = bwd_fabric.run(lambda comm: bwd(comm, mesh, dys[comm.rank].local, fwd_out[comm.rank][1]))
    xspec = xs[0].spec
    result.dx = gather_full([ShardedTensor(xspec, r, out[0]) for r, out in enumerate(bwd_out)])
    result.dweights = tuple(
        gather_full([ShardedTensor(spec, r, out[1 + n]) for r, out in enumerate(bwd_out)])
        for n, spec in enumerate(wspecs)
    )
    result.backward_ledger = bwd_fabric.ledger
    return result
