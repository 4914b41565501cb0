import pytest
from hypothesis import given, strategies as st

from tpsim.errors import ConstraintViolation, UnknownAxis
from tpsim.mesh import (
    DATA_PARALLEL,
    ONE_D,
    SEQUENCE,
    THREE_D,
    TWO_D,
    Mode,
    ParallelMode,
    admissible_meshes,
    build_mesh,
    groups_along,
    integer_root,
    two_point_five_d,
)


def test_2d_sixteen_ranks_is_four_by_four():
    assert build_mesh(TWO_D, 16).dims == (4, 4)


def test_2p5d_depth_two_on_eight_ranks():
    assert build_mesh(two_point_five_d(2), 8).dims == (2, 2, 2)


def test_3d_rejects_six_ranks():
    with pytest.raises(ConstraintViolation, match="perfect cube"):
        build_mesh(THREE_D, 6)


@pytest.mark.parametrize("mode,p", [(TWO_D, 8), (two_point_five_d(2), 6), (two_point_five_d(3), 8), (THREE_D, 9)])
def test_bad_rank_counts_are_hard_errors(mode, p):
    with pytest.raises(ConstraintViolation):
        build_mesh(mode, p)


def test_zero_world_rejected():
    with pytest.raises(ConstraintViolation):
        build_mesh(ONE_D, 0)


def test_depth_must_be_positive():
    with pytest.raises(ConstraintViolation):
        two_point_five_d(0)


def test_depth_one_allowed():
    assert build_mesh(two_point_five_d(1), 4).dims == (1, 2, 2)


def test_2d_rows():
    groups = groups_along(build_mesh(TWO_D, 4), "row")
    assert [list(g.ranks) for g in groups] == [[0, 1], [2, 3]]


def test_2d_columns():
    groups = groups_along(build_mesh(TWO_D, 4), "column")
    assert [list(g.ranks) for g in groups] == [[0, 2], [1, 3]]


def test_3d_depth_groups():
    groups = groups_along(build_mesh(THREE_D, 8), "depth")
    assert len(groups) == 4 and all(g.size == 2 for g in groups)


def test_1d_ring_is_single_group():
    groups = groups_along(build_mesh(ONE_D, 4), "ring")
    assert [list(g.ranks) for g in groups] == [[0, 1, 2, 3]]


def test_unknown_axis():
    with pytest.raises(UnknownAxis):
        groups_along(build_mesh(ONE_D, 4), "depth")


def test_2d_row_major_rank_formula():
    mesh = build_mesh(TWO_D, 9)
    for r in range(9):
        i, c = mesh.coords(r)
        assert r == i * 3 + c


def test_2p5d_depth_is_outermost():
    mesh = build_mesh(two_point_five_d(2), 8)
    assert [mesh.coords(r)[0] for r in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]


def test_parse_names_and_str():
    assert ParallelMode.parse("2.5d", 2) == two_point_five_d(2)
    assert str(two_point_five_d(2)) == "2.5d(depth=2)"
    assert str(ParallelMode.parse("3D")) == "3d"
    assert ParallelMode.parse("seq").tag is Mode.SEQUENCE
    # depth only matters for 2.5D
    assert ParallelMode.parse("2d", 4).depth == 1
    with pytest.raises(ConstraintViolation):
        ParallelMode.parse("4d")


def test_integer_root():
    assert integer_root(27, 3) == 3
    assert integer_root(26, 3) is None
    assert integer_root(1, 2) == 1


def test_admissible_2p5d_lists_every_depth():
    dims = [m.dims for m in admissible_meshes("2.5d", 8)]
    assert (2, 2, 2) in dims and (8, 1, 1) in dims and (1, 2, 2) in dims


def _all_meshes(max_world=64):
    out = []
    for name in ("1d", "2d", "3d", "seq", "data", "2.5d"):
        out += admissible_meshes(name, max_world)
    return out


MESHES = _all_meshes()


@given(st.sampled_from(MESHES))
def test_groups_partition_ranks(mesh):
    for axis in mesh.axes:
        groups = groups_along(mesh, axis)
        members = [r for g in groups for r in g.ranks]
        assert sorted(members) == list(range(mesh.world_size))
        axis_len = mesh.dims[{"ring": 0, "data": 0, "depth": 0}.get(axis, -1 if axis == "row" else -2)]
        assert all(g.size == axis_len for g in groups)
        assert all(len(set(g.ranks)) == g.size for g in groups)


@given(st.sampled_from(MESHES))
def test_groups_order_ascending_coordinate(mesh):
    for axis in mesh.axes:
        for g in groups_along(mesh, axis):
            coords = [mesh.coords(r) for r in g.ranks]
            assert coords == sorted(coords)


@given(st.sampled_from(MESHES))
def test_coords_round_trip(mesh):
    for r in range(mesh.world_size):
        assert mesh.rank_of(mesh.coords(r)) == r
    assert len(set(mesh.coords(r) for r in range(mesh.world_size))) == mesh.world_size


@given(st.sampled_from([ONE_D, TWO_D, THREE_D, SEQUENCE, DATA_PARALLEL, two_point_five_d(2)]),
       st.integers(1, 128))
def test_build_mesh_is_pure(mode, p):
    try:
        a = build_mesh(mode, p)
    except ConstraintViolation:
        with pytest.raises(ConstraintViolation):
            build_mesh(mode, p)
        return
    b = build_mesh(mode, p)
    assert a == b
    assert [a.coords(r) for r in range(p)] == [b.coords(r) for r in range(p)]
    product = 1
    for d in a.dims:
        product *= d
    assert product == p
