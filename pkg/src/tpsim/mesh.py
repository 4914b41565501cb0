"""Rank topologies and communication groups for each parallel mode.

Ranks are laid out row-major over the mesh dims, so for a 2D ``j x j`` mesh
``rank = i * j + c``. For 2.5D the dims are ``[depth, row, col]`` with depth
outermost; 3D uses ``[l, l, l]``.

Group naming follows the shape of the group rather than the coordinate that
varies: a ``"row"`` group is a set of ranks sharing every coordinate except the
last one, a ``"column"`` group varies the second-to-last coordinate and a
``"depth"`` group varies the first coordinate of a 3-axis mesh.
"""
from __future__ import annotations

import enum
import functools
import itertools
from dataclasses import dataclass, field

from .errors import ConstraintViolation, UnknownAxis


class Mode(enum.Enum):
    ONE_D = "1d"
    TWO_D = "2d"
    TWO_POINT_FIVE_D = "2.5d"
    THREE_D = "3d"
    SEQUENCE = "seq"
    DATA_PARALLEL = "data"


_MODE_ALIASES = {
    "1d": Mode.ONE_D,
    "2d": Mode.TWO_D,
    "2.5d": Mode.TWO_POINT_FIVE_D,
    "2p5d": Mode.TWO_POINT_FIVE_D,
    "3d": Mode.THREE_D,
    "seq": Mode.SEQUENCE,
    "sequence": Mode.SEQUENCE,
    "data": Mode.DATA_PARALLEL,
    "dp": Mode.DATA_PARALLEL,
    "zero": Mode.DATA_PARALLEL,
}


@dataclass(frozen=True)
class ParallelMode:
    tag: Mode
    depth: int = 1

    def __post_init__(self):
        if not isinstance(self.depth, int) or self.depth < 1:
            raise ConstraintViolation(f"depth must be a positive integer, got {self.depth!r}")

    @classmethod
    def parse(cls, name: str, depth: int = 1) -> "ParallelMode":
        try:
            tag = _MODE_ALIASES[name.strip().lower()]
        except KeyError:
            raise ConstraintViolation(f"unknown parallel mode {name!r}") from None
        return cls(tag, depth if tag is Mode.TWO_POINT_FIVE_D else 1)

    @property
    def name(self) -> str:
        return self.tag.value

    def __str__(self):
        if self.tag is Mode.TWO_POINT_FIVE_D:
            return f"2.5d(depth={self.depth})"
        return self.tag.value


ONE_D = ParallelMode(Mode.ONE_D)
TWO_D = ParallelMode(Mode.TWO_D)
THREE_D = ParallelMode(Mode.THREE_D)
SEQUENCE = ParallelMode(Mode.SEQUENCE)
DATA_PARALLEL = ParallelMode(Mode.DATA_PARALLEL)


def two_point_five_d(depth: int) -> ParallelMode:
    return ParallelMode(Mode.TWO_POINT_FIVE_D, depth)


@dataclass(frozen=True)
class CommGroup:
    id: str
    ranks: tuple[int, ...]
    axis: str

    @property
    def size(self) -> int:
        return len(self.ranks)

    def index(self, rank: int) -> int:
        return self.ranks.index(rank)

    def __contains__(self, rank):
        return rank in self.ranks


def integer_root(n: int, k: int) -> int | None:
    """Exact integer k-th root of n, or None."""
    r = round(n ** (1.0 / k))
    for cand in (r - 1, r, r + 1):
        if cand >= 1 and cand**k == n:
            return cand
    return None


# Axis label -> index of the coordinate that varies inside the group.
_AXES = {
    Mode.ONE_D: {"ring": 0},
    Mode.SEQUENCE: {"ring": 0},
    Mode.DATA_PARALLEL: {"data": 0},
    Mode.TWO_D: {"row": 1, "column": 0},
    Mode.TWO_POINT_FIVE_D: {"row": 2, "column": 1, "depth": 0},
    Mode.THREE_D: {"row": 2, "column": 1, "depth": 0},
}


@dataclass(frozen=True)
class DeviceMesh:
    mode: ParallelMode
    world_size: int
    dims: tuple[int, ...]
    _coords: tuple[tuple[int, ...], ...] = field(repr=False, compare=False)

    @property
    def axes(self) -> tuple[str, ...]:
        return tuple(_AXES[self.mode.tag])

    def coords(self, rank: int) -> tuple[int, ...]:
        return self._coords[rank]

    def rank_of(self, coords) -> int:
        rank = 0
        for c, d in zip(coords, self.dims):
            if not 0 <= c < d:
                raise ValueError(f"coordinate {tuple(coords)} outside mesh {self.dims}")
            rank = rank * d + c
        return rank

    def side(self) -> int:
        """Edge length of the square/cube face (j, k or l); p for line meshes."""
        return self.dims[-1]

    def groups_along(self, axis: str) -> list[CommGroup]:
        return groups_along(self, axis)

    def group_of(self, rank: int, axis: str) -> CommGroup:
        for g in groups_along(self, axis):
            if rank in g.ranks:
                return g
        raise AssertionError("unreachable: groups partition the mesh")


def build_mesh(mode: ParallelMode, world_size: int) -> DeviceMesh:
    """Solve the mesh dims for ``mode`` on ``world_size`` ranks."""
    if not isinstance(world_size, int) or world_size < 1:
        raise ConstraintViolation(f"world_size must be a positive integer, got {world_size!r}")
    p = world_size
    tag = mode.tag
    if tag in (Mode.ONE_D, Mode.SEQUENCE, Mode.DATA_PARALLEL):
        dims = (p,)
    elif tag is Mode.TWO_D:
        j = integer_root(p, 2)
        if j is None:
            raise ConstraintViolation(f"world_size must be a perfect square for 2d, got {p}")
        dims = (j, j)
    elif tag is Mode.TWO_POINT_FIVE_D:
        d = mode.depth
        k = integer_root(p // d, 2) if p % d == 0 else None
        if k is None:
            raise ConstraintViolation(
                f"world_size must equal depth * k^2 for 2.5d (depth={d}), got {p}"
            )
        dims = (d, k, k)
    elif tag is Mode.THREE_D:
        l = integer_root(p, 3)
        if l is None:
            raise ConstraintViolation(f"world_size must be a perfect cube for 3d, got {p}")
        dims = (l, l, l)
    else:  # pragma: no cover
        raise ConstraintViolation(f"unsupported mode {mode}")
    coords = tuple(itertools.product(*(range(d) for d in dims)))
    return DeviceMesh(mode, p, dims, coords)


@functools.lru_cache(maxsize=None)
def _groups(mesh: "DeviceMesh", axis: str) -> tuple[CommGroup, ...]:
    table = _AXES[mesh.mode.tag]
    if axis not in table:
        raise UnknownAxis(f"mesh {mesh.mode} has no axis {axis!r}; axes are {sorted(table)}")
    vary = table[axis]
    fixed = [i for i in range(len(mesh.dims)) if i != vary]
    groups = []
    for n, rest in enumerate(itertools.product(*(range(mesh.dims[i]) for i in fixed))):
        members = []
        for v in range(mesh.dims[vary]):
            c = [0] * len(mesh.dims)
            c[vary] = v
            for i, val in zip(fixed, rest):
                c[i] = val
            members.append(mesh.rank_of(c))
        groups.append(CommGroup(f"{axis}{n}", tuple(members), axis))
    return tuple(groups)


def groups_along(mesh: DeviceMesh, axis: str) -> list[CommGroup]:
    return list(_groups(mesh, axis))


def admissible_meshes(mode_name: str, max_world: int) -> list[DeviceMesh]:
    """Every valid mesh for a mode up to ``max_world`` ranks (2.5D: every depth)."""
    out = []
    for p in range(1, max_world + 1):
        if mode_name == "2.5d":
            for d in range(1, p + 1):
                if p % d == 0 and integer_root(p // d, 2) is not None:
                    out.append(build_mesh(two_point_five_d(d), p))
            continue
        try:
            out.append(build_mesh(ParallelMode.parse(mode_name), p))
        except ConstraintViolation:
            pass
    return out
