"""Closed-form communication and memory models, and reconciliation with measured runs.

Two communication models are kept apart on purpose:

``paper_comm_volume``
    the published per-mode totals, evaluated verbatim with ``S_y = S_x``.
``derived_comm_volume``
    what :func:`tpsim.tp_linear.run_linear` must send for one forward plus
    backward pass under the fabric's collective decompositions.

:func:`reconcile` runs the layer, checks the ledger against the derived model
to the element and reports the ratio of measured to published volume.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from math import gcd

from .errors import ConstraintViolation, IndivisibleDim, TpsimError
from .mesh import DeviceMesh, Mode, ParallelMode, build_mesh, integer_root, two_point_five_d
from .tp_linear import ShardSpec, layouts_for, make_problem, run_linear

PAPER_RANGE_TEST = {
    # (sweep, value, world_size, mode label) -> reported reduction vs 1D in percent
    ("hidden", 16384, 8, "2.5d(depth=2)"): 62.0,
    ("hidden", 16384, 8, "3d"): 74.2,
    ("batch", 512, 8, "2.5d(depth=2)"): 44.0,
    ("batch", 512, 8, "3d"): 65.0,
}


class ReconciliationMismatch(TpsimError):
    pass


@dataclass(frozen=True)
class WorkloadShape:
    b: int
    s: int
    h: int
    r: int = 4
    layers: int = 2

    def __post_init__(self):
        for name in ("b", "s", "h", "r", "layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def tokens(self) -> int:
        return self.b * self.s

    @property
    def s_x(self) -> int:
        return self.b * self.s * self.h

    @property
    def s_w(self) -> int:
        """Elements of the square ``[h, h]`` weight of the single-matmul model."""
        return self.h * self.h

    @property
    def s_y(self) -> int:
        return self.s_x


def _as_number(q: Fraction):
    return q.numerator if q.denominator == 1 else q


def paper_comm_volume(mesh: DeviceMesh, shape: WorkloadShape):
    """Published total volume (elements) for ``Y = X W`` with square ``W``."""
    sx, sw, sy = shape.s_x, shape.s_w, shape.s_y
    tag = mesh.mode.tag
    if tag is Mode.ONE_D:
        p = mesh.world_size
        return 2 * (p - 1) * sx
    if tag is Mode.TWO_D:
        j = mesh.dims[0]
        return 3 * (j - 1) * (sx + sw)
    if tag is Mode.TWO_POINT_FIVE_D:
        d, k, _ = mesh.dims
        return _as_number(3 * (k - 1) * (Fraction(sx, d) + sw))
    if tag is Mode.THREE_D:
        l = mesh.dims[0]
        return _as_number(Fraction(2 * (l - 1) * (sx + sw + sy), l))
    raise ConstraintViolation(f"no published volume for mode {mesh.mode}")


def derived_comm_volume(mesh: DeviceMesh, shape: WorkloadShape) -> int:
    """Elements sent by one forward + backward pass of :func:`run_linear`.

    1D runs the two-matmul MLP (its two all-reduces each move ``2(p-1) S_x``);
    the other modes run the single square matmul.
    """
    sx, sw, sy = shape.s_x, shape.s_w, shape.s_y
    tag = mesh.mode.tag
    if tag is Mode.ONE_D:
        return 4 * (mesh.world_size - 1) * sx
    if tag is Mode.TWO_D:
        j = mesh.dims[0]
        return 3 * (j - 1) * (sx + sw)
    if tag is Mode.TWO_POINT_FIVE_D:
        d, k, _ = mesh.dims
        return 3 * (k - 1) * (sx + d * sw) + 2 * (d - 1) * sw
    if tag is Mode.THREE_D:
        l = mesh.dims[0]
        return 2 * (l - 1) * (sx + sw + sy)
    if tag is Mode.SEQUENCE:
        # K pass + V pass, d_k = h, per sequence in the batch
        return 2 * (mesh.world_size - 1) * sx
    raise ConstraintViolation(f"no derived volume for mode {mesh.mode}")


def derived_volume_by_axis(mesh: DeviceMesh, shape: WorkloadShape) -> dict[str, int]:
    sx, sw, sy = shape.s_x, shape.s_w, shape.s_y
    tag = mesh.mode.tag
    if tag is Mode.ONE_D:
        return {"ring": derived_comm_volume(mesh, shape)}
    if tag is Mode.TWO_D:
        j = mesh.dims[0]
        # row: X broadcasts (fwd, dW) + dX reduces; column: W broadcasts (fwd, dX) + dW reduces
        return {"column": 3 * (j - 1) * sw, "row": 3 * (j - 1) * sx}
    if tag is Mode.TWO_POINT_FIVE_D:
        d, k, _ = mesh.dims
        return {"column": 3 * (k - 1) * d * sw, "depth": 2 * (d - 1) * sw, "row": 3 * (k - 1) * sx}
    if tag is Mode.THREE_D:
        l = mesh.dims[0]
        return {"column": 2 * (l - 1) * sy, "depth": 2 * (l - 1) * sw, "row": 2 * (l - 1) * sx}
    raise ConstraintViolation(f"no per-axis model for mode {mesh.mode}")


# -- reconciliation -------------------------------------------------------


@dataclass
class ReconciliationReport:
    mode: str
    world_size: int
    dims: tuple[int, ...]
    shape: WorkloadShape
    measured: int
    derived: int
    paper: int | Fraction
    measured_by_axis: dict[str, int] = field(default_factory=dict)
    derived_by_axis: dict[str, int] = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        """Measured over published volume; 1.0 when both vanish (single-rank meshes)."""
        if self.paper == 0:
            if self.measured == 0:
                return 1.0
            raise ZeroDivisionError(f"{self.mode}: published volume is 0 but {self.measured} measured")
        return float(Fraction(self.measured) / Fraction(self.paper))

    @property
    def derived_over_paper(self) -> float:
        if self.paper == 0:
            return 1.0 if self.derived == 0 else float("inf")
        return float(Fraction(self.derived) / Fraction(self.paper))


def unit_dims(mesh: DeviceMesh, expansion: int = 4) -> tuple[int, int]:
    """Smallest (rows, hidden) that every layout of the mode divides."""
    tag = mesh.mode.tag
    if tag is Mode.ONE_D:
        p = mesh.world_size
        # W1 [h, r h] splits by columns, W2 [r h, h] by rows: need p | r h
        return 1, p // gcd(p, expansion)
    if tag is Mode.TWO_D:
        j = mesh.dims[0]
        return j, j
    if tag is Mode.TWO_POINT_FIVE_D:
        d, k, _ = mesh.dims
        return d * k, k
    if tag is Mode.THREE_D:
        l = mesh.dims[0]
        return l * l, l * l
    raise ConstraintViolation(f"{mesh.mode} is not a tensor-parallel mode")


def minimal_shape(mesh: DeviceMesh, expansion: int = 4) -> WorkloadShape:
    um, uh = unit_dims(mesh, expansion)
    return WorkloadShape(b=um, s=1, h=uh, r=expansion)


def reconcile(mesh: DeviceMesh, shape: WorkloadShape | None = None, seed: int = 42,
              scheduler: str = "threads") -> ReconciliationReport:
    """Run forward + backward on the fabric and compare the ledger with both models."""
    shape = shape or minimal_shape(mesh)
    x, weights = make_problem(mesh.mode.tag, shape.tokens, shape.h, seed, shape.r)
    res = run_linear(mesh, x, weights, dy="loss", scheduler=scheduler)
    measured = res.total_volume
    derived = derived_comm_volume(mesh, shape)
    if measured != derived:
        raise ReconciliationMismatch(
            f"{mesh.mode} p={mesh.world_size}: measured {measured} != derived {derived}"
        )
    by_axis = res.volume_by_axis()
    derived_axis = derived_volume_by_axis(mesh, shape)
    if {a: v for a, v in by_axis.items() if v} != {a: v for a, v in derived_axis.items() if v}:
        raise ReconciliationMismatch(f"{mesh.mode}: per-axis {by_axis} != derived {derived_axis}")
    return ReconciliationReport(
        str(mesh.mode), mesh.world_size, mesh.dims, shape, measured, derived,
        paper_comm_volume(mesh, shape), by_axis, derived_axis,
    )


def reconcilable_meshes(max_world: int) -> list[DeviceMesh]:
    """Every tensor-parallel mesh up to ``max_world`` ranks with a finite published ratio.

    2.5D meshes with a single-rank plane (k = 1, d > 1) are left out: the
    published formula is zero there while the depth all-reduce is not.
    """
    out = []
    for p in range(1, max_world + 1):
        out.append(build_mesh(ParallelMode(Mode.ONE_D), p))
        if integer_root(p, 2):
            out.append(build_mesh(ParallelMode(Mode.TWO_D), p))
        for d in range(1, p + 1):
            if p % d == 0:
                k = integer_root(p // d, 2)
                if k and (k >= 2 or d == 1):
                    out.append(build_mesh(two_point_five_d(d), p))
        if integer_root(p, 3):
            out.append(build_mesh(ParallelMode(Mode.THREE_D), p))
    return out


def write_reconciliation_csv(reports: list[ReconciliationReport], fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["p", "mode", "dims", "b", "s", "h", "measured", "derived", "paper_model", "ratio",
                "measured_by_axis"])
    for r in reports:
        w.writerow([
            r.world_size, r.mode, "x".join(map(str, r.dims)), r.shape.b, r.shape.s, r.shape.h,
            r.measured, r.derived, format_number(r.paper), f"{r.ratio:.4f}",
            ";".join(f"{a}={v}" for a, v in r.measured_by_axis.items()),
        ])


def format_number(v) -> str:
    if isinstance(v, Fraction):
        return f"{float(v):.4f}"
    return str(v)


# -- scaling sweep --------------------------------------------------------

SCALING_SHAPE = WorkloadShape(b=32, s=512, h=1024)


@dataclass(frozen=True)
class ScalingRow:
    p: int
    mode: str
    dims: tuple[int, ...]
    paper_model: int | Fraction
    derived_model: int


def meshes_for_world(p: int, depths=None) -> list[DeviceMesh]:
    """Tensor-parallel meshes on exactly ``p`` ranks (2.5D for every depth with k >= 2)."""
    out = [build_mesh(ParallelMode(Mode.ONE_D), p)]
    if integer_root(p, 2):
        out.append(build_mesh(ParallelMode(Mode.TWO_D), p))
    for d in depths or range(1, p + 1):
        if p % d == 0:
            k = integer_root(p // d, 2)
            if k and k >= 2:
                out.append(build_mesh(two_point_five_d(d), p))
    if integer_root(p, 3):
        out.append(build_mesh(ParallelMode(Mode.THREE_D), p))
    return out


def scaling_table(p_values, shape: WorkloadShape = SCALING_SHAPE, depths=None) -> list[ScalingRow]:
    rows = []
    for p in sorted(set(p_values)):
        for mesh in meshes_for_world(p, depths):
            rows.append(ScalingRow(p, str(mesh.mode), mesh.dims, paper_comm_volume(mesh, shape),
                                   derived_comm_volume(mesh, shape)))
    return rows


def write_scaling_csv(rows: list[ScalingRow], fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["p", "mode", "dims", "paper_model_elements", "derived_model_elements"])
    for r in rows:
        w.writerow([r.p, r.mode, "x".join(map(str, r.dims)), format_number(r.paper_model), r.derived_model])


# -- memory ---------------------------------------------------------------

MEMORY_KINDS = ("weights", "activations", "model_data_total")


def _layer_shapes(shape: WorkloadShape):
    wide = shape.r * shape.h
    weights = [(shape.h, wide) if n % 2 == 0 else (wide, shape.h) for n in range(shape.layers)]
    acts = [(shape.tokens, shape.h if n % 2 == 0 else wide) for n in range(shape.layers + 1)]
    return weights, acts


def _memory_layouts(mesh: DeviceMesh):
    tag = mesh.mode.tag
    if tag is Mode.ONE_D:
        return ("1d_col", "1d_row"), ("replicated", "1d_col")
    if tag is Mode.SEQUENCE:
        return ("replicated", "replicated"), ("1d_row", "1d_row")
    lay = layouts_for(tag)
    return (lay["w"], lay["w"]), (lay["x"], lay["y"])


def memory_per_rank(mesh: DeviceMesh, shape: WorkloadShape, what: str = "model_data_total") -> int:
    """Elements one rank holds for an ``L``-layer stack of linear layers.

    Layers alternate ``[h, r h]`` and ``[r h, h]``; the stack's ``L + 1``
    boundary activations alternate widths ``h`` and ``r h``. 1D follows the
    Megatron pairing (column split then row split), which leaves even-index
    activations replicated and odd-index ones split. Counts come from the
    block shapes of the same layouts :mod:`tpsim.tp_linear` uses.
    """
    if what not in MEMORY_KINDS:
        raise ValueError(f"what must be one of {MEMORY_KINDS}")
    wl, al = _memory_layouts(mesh)
    weights, acts = _layer_shapes(shape)
    total_w = total_a = 0
    try:
        for n, ws in enumerate(weights):
            br, bc = ShardSpec(mesh, ws, wl[n % 2]).block_shape
            total_w += br * bc
        for n, a in enumerate(acts):
            br, bc = ShardSpec(mesh, a, al[n % 2]).block_shape
            total_a += br * bc
    except IndivisibleDim as exc:
        raise IndivisibleDim(f"{mesh.mode} on {mesh.world_size} ranks: {exc}") from None
    return {"weights": total_w, "activations": total_a, "model_data_total": total_w + total_a}[what]


def global_memory(shape: WorkloadShape) -> tuple[int, int]:
    weights, acts = _layer_shapes(shape)
    return sum(a * b for a, b in weights), sum(a * b for a, b in acts)


@dataclass(frozen=True)
class RangeRow:
    sweep: str
    value: int
    world_size: int
    mode: str
    per_rank_elements: int
    reduction_vs_1d_pct: float
    paper_pct: float | None


def range_test(world_size: int, sweep: str, values, base: WorkloadShape, depths=None) -> list[RangeRow]:
    """Per-rank element counts across a batch-size or hidden-size sweep."""
    if sweep not in ("batch", "hidden"):
        raise ValueError("sweep must be 'batch' or 'hidden'")
    rows = []
    for v in sorted(set(values)):
        shape = (WorkloadShape(v, base.s, base.h, base.r, base.layers) if sweep == "batch"
                 else WorkloadShape(base.b, base.s, v, base.r, base.layers))
        meshes = meshes_for_world(world_size, depths)
        base_1d = memory_per_rank(meshes[0], shape)
        for mesh in meshes:
            try:
                n = memory_per_rank(mesh, shape)
            except IndivisibleDim:
                continue
            label = str(mesh.mode)
            rows.append(RangeRow(sweep, v, world_size, label, n, 100.0 * (1 - n / base_1d),
                                 PAPER_RANGE_TEST.get((sweep, v, world_size, label))))
    return rows


def write_range_csv(rows: list[RangeRow], fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["sweep", "sweep_var", "world_size", "mode", "per_rank_elements", "reduction_vs_1d_pct",
                "paper_reported_pct"])
    for r in rows:
        w.writerow([r.sweep, r.value, r.world_size, r.mode, r.per_rank_elements,
                    f"{r.reduction_vs_1d_pct:.2f}", "" if r.paper_pct is None else f"{r.paper_pct:.1f}"])


# -- pipeline boundary ----------------------------------------------------


def pipeline_boundary_volume(mode: ParallelMode | str, p_tensor: int, boundary_elements: int) -> tuple[int, int]:
    """(cross-stage elements per rank pair, intra-node gather overhead).

    1D activations are replicated, so a stage boundary splits them across the
    tensor group before sending and all-gathers them afterwards. The other
    modes already hold a ``1/p`` chunk and send it as is.
    """
    if isinstance(mode, str):
        mode = ParallelMode.parse(mode)
    if p_tensor < 1:
        raise ConstraintViolation("p_tensor must be positive")
    if boundary_elements % p_tensor:
        raise IndivisibleDim(f"boundary size {boundary_elements} not divisible by {p_tensor}")
    cross = boundary_elements // p_tensor
    if mode.tag is Mode.ONE_D:
        return cross, (p_tensor - 1) * boundary_elements
    return cross, 0
