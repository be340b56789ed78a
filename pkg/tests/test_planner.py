import math

import numpy as np
import pytest
from scipy.sparse import lil_matrix
from scipy.sparse.csgraph import dijkstra as sp_dijkstra

from affmap.errors import AffordanceNotFound, BlockedEndpoint, InvariantViolation, NoPath
from affmap.mapping import FREE, OCCUPIED, OccupancyGrid
from affmap.planner import (NavPath, NavQuery, astar, navigate, neighbors, path_cost,
                            select_goal, traversable, validate_path)

from oracles import dijkstra_steps

CLASSES = ("wash", "dry", "cut")


def make_grid(state, cell_size=0.1, counts=None, objects=None):
    state = np.asarray(state, dtype=np.int8)
    if counts is None:
        counts = np.zeros(state.shape + (len(CLASSES),), dtype=np.int64)
    return OccupancyGrid(np.zeros(3), cell_size, state, CLASSES, counts, objects or {})


def random_grid(rng, n=20, density=None):
    density = rng.uniform(0.1, 0.4) if density is None else density
    return make_grid(np.where(rng.random((n, n)) < density, OCCUPIED, FREE))


def test_start_equals_goal():
    p = astar(make_grid(np.zeros((3, 3))), (1, 1), (1, 1))
    assert p.cells == [(1, 1)] and p.cost_m == 0.0


def test_empty_grid_diagonal():
    p = astar(make_grid(np.zeros((10, 10))), (0, 0), (9, 9))
    assert p.cost_m == 9 * math.sqrt(2) * 0.1
    assert p.diagonal_steps == 9 and len(p.cells) == 10


def test_no_corner_cutting():
    state = np.zeros((2, 2))
    state[0, 1] = OCCUPIED
    free = state == FREE
    assert (1, 1) not in dict(neighbors(free, (0, 0)))
    p = astar(make_grid(state), (0, 0), (1, 1))
    assert p.cells == [(0, 0), (1, 0), (1, 1)] and p.cost_m == 0.2
    state = np.zeros((2, 2))
    state[0, 1] = state[1, 0] = OCCUPIED
    with pytest.raises(NoPath):
        astar(make_grid(state), (0, 0), (1, 1))


def test_blocked_endpoints():
    state = np.zeros((3, 3))
    state[1, 1] = OCCUPIED
    with pytest.raises(BlockedEndpoint):
        astar(make_grid(state), (1, 1), (0, 0))
    with pytest.raises(BlockedEndpoint):
        astar(make_grid(state), (0, 0), (5, 5))


def test_astar_equals_exact_dijkstra(rng):
    for _ in range(100):
        grid = random_grid(rng)
        free = traversable(grid)
        cells = list(zip(*np.nonzero(free)))
        s = cells[rng.integers(len(cells))]
        g = cells[rng.integers(len(cells))]
        best = dijkstra_steps(free, s)
        if g not in best:
            with pytest.raises(NoPath):
                astar(grid, s, g)
            continue
        p = astar(grid, s, g, debug=True)
        assert (p.orthogonal_steps, p.diagonal_steps) == best[g]
        assert p.cost_m == path_cost(*best[g], grid.cell_size)
        validate_path(grid, p)


def test_scipy_cross_check(rng):
    grid = random_grid(rng, 15, 0.25)
    free = traversable(grid)
    n = free.size
    W = lil_matrix((n, n))
    for r, c in zip(*np.nonzero(free)):
        for (nr, nc), diag in neighbors(free, (r, c)):
            W[r * 15 + c, nr * 15 + nc] = math.sqrt(2) if diag else 1.0
    start = tuple(np.argwhere(free)[0])
    dist = sp_dijkstra(W.tocsr(), indices=start[0] * 15 + start[1])
    for r, c in zip(*np.nonzero(free)):
        d = dist[r * 15 + c]
        if np.isfinite(d):
            assert astar(grid, start, (r, c)).cost_m == pytest.approx(d * 0.1, abs=1e-9)


def test_validate_path_rejects_bad_paths():
    grid = make_grid(np.zeros((3, 3)))
    with pytest.raises(InvariantViolation):
        validate_path(grid, NavPath([(0, 0), (2, 2)], 0.2 * math.sqrt(2)))
    with pytest.raises(InvariantViolation):
        validate_path(grid, NavPath([(0, 0), (0, 1)], 0.1000001))


def test_debug_mode_catches_inadmissible_heuristic(monkeypatch):
    import affmap.planner as planner

    monkeypatch.setattr(planner.math, "hypot", lambda a, b: 10.0 * (abs(a) + abs(b)))
    with pytest.raises(InvariantViolation):
        planner.astar(make_grid(np.zeros((4, 4))), (0, 0), (3, 3), debug=True)


def grid_with(counts_at, state=None, shape=(8, 8), objects=None):
    counts = np.zeros(shape + (len(CLASSES),), dtype=np.int64)
    for (r, c, k), n in counts_at.items():
        counts[r, c, k] = n
    state = np.zeros(shape) if state is None else state
    return make_grid(state, counts=counts, objects=objects)


def test_goal_is_nearest_free_to_occupied_affordance_cell():
    state = np.zeros((8, 8))
    state[0, :] = OCCUPIED  # a counter along the top wall
    grid = grid_with({(0, 4, 0): 3}, state)
    goal, aff = select_goal(grid, NavQuery("wash", start=(7, 4)))
    assert aff == (0, 4) and goal == (1, 4)


def test_goal_prefers_higher_count_zone():
    grid = grid_with({(1, 1, 0): 1, (6, 6, 0): 5})
    goal, aff = select_goal(grid, NavQuery("wash", start=(1, 2)))
    assert aff == (6, 6) and goal == (6, 6)


def test_goal_ties_break_by_distance_then_index():
    grid = grid_with({(0, 0, 0): 2, (7, 7, 0): 2, (0, 7, 0): 2})
    assert select_goal(grid, NavQuery("wash", start=(7, 6)))[1] == (7, 7)
    # equidistant candidates fall back to row-major order
    g2 = grid_with({(0, 0, 0): 2, (0, 6, 0): 2})
    assert select_goal(g2, NavQuery("wash", start=(4, 3)))[1] == (0, 0)


def test_goal_skips_unreachable_pockets():
    state = np.zeros((7, 7))
    state[0:3, 0:3] = OCCUPIED
    state[1, 1] = FREE  # sealed hole next to the affordance
    grid = grid_with({(1, 2, 0): 1}, state, shape=(7, 7))
    goal, _ = select_goal(grid, NavQuery("wash", start=(6, 6)))
    assert goal in {(1, 3), (3, 2)}
    path = astar(grid, (6, 6), goal)
    validate_path(grid, path)


def test_goal_errors_and_object_filter():
    grid = grid_with({(2, 2, 0): 1}, objects={(2, 2): {"sink"}})
    with pytest.raises(AffordanceNotFound):
        select_goal(grid, NavQuery("dry", start=(0, 0)))
    with pytest.raises(AffordanceNotFound):
        select_goal(grid, NavQuery("fly", start=(0, 0)))
    with pytest.raises(AffordanceNotFound):
        select_goal(grid, NavQuery("wash", start=(0, 0), object="pan"))
    assert select_goal(grid, NavQuery("wash", start=(0, 0), object="sink"))[1] == (2, 2)


def test_select_goal_deterministic(rng):
    counts = {(int(r), int(c), 1): int(n) for r, c, n in rng.integers(0, 8, (10, 3))}
    counts = {k: v for k, v in counts.items() if v}
    grid = grid_with(counts)
    q = NavQuery("dry", start=(3, 3))
    assert len({select_goal(grid, q) for _ in range(5)}) == 1


def test_sink_to_drying_zone_fixture():
    # counter along the top with a sink; drying rack at the right wall; island in the middle
    state = np.zeros((12, 16))
    state[0, :] = OCCUPIED
    state[:, 15] = OCCUPIED
    state[4:8, 5:10] = OCCUPIED
    counts = {(0, 3, 0): 6, (5, 15, 1): 4, (6, 15, 1): 2}
    grid = grid_with(counts, state, shape=(12, 16))
    sink_goal, _ = select_goal(grid, NavQuery("wash", start=(10, 2)))
    path = navigate(grid, NavQuery("dry", start=sink_goal))
    validate_path(grid, path)
    end = path.cells[-1]
    near = grid.class_counts[max(0, end[0] - 1):end[0] + 2, max(0, end[1] - 1):end[1] + 2, 1]
    assert near.sum() > 0
    assert path.trace["affordance_cell"] == [5, 15]


def test_unreachable_goal_no_path():
    state = np.zeros((5, 5))
    state[:, 2] = OCCUPIED
    with pytest.raises(NoPath):
        astar(make_grid(state), (0, 0), (0, 4))


def test_inflation_shrinks_free_space():
    state = np.zeros((7, 7))
    state[3, 3] = OCCUPIED
    free = traversable(make_grid(state), inflation=1)
    assert not free[2, 3] and not free[3, 4] and free[2, 2]
