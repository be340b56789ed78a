"""Task-oriented navigation on an occupancy grid.

A goal is chosen from the cells that carry the queried affordance, then
A* searches the free space with 8-connected moves (orthogonal cost 1,
diagonal sqrt(2), times the cell size). A diagonal move needs both
orthogonal neighbours free, so paths never cut corners.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AffordanceNotFound, BlockedEndpoint, ConfigError, InvariantViolation, NoPath
from .mapping import FREE, OccupancyGrid

SQRT2 = math.sqrt(2.0)
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))

Cell = tuple[int, int]


@dataclass(frozen=True)
class NavQuery:
    verb: str
    start: Cell | None = None
    start_xy: tuple[float, float] | None = None
    object: str | None = None


@dataclass
class NavPath:
    cells: list[Cell]
    cost_m: float
    orthogonal_steps: int = 0
    diagonal_steps: int = 0
    trace: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"cells": [list(c) for c in self.cells], "cost_m": self.cost_m}


def traversable(grid: OccupancyGrid, inflation: int = 0) -> np.ndarray:
    """Boolean free-space mask, optionally shrunk by ``inflation`` cells around obstacles."""
    free = grid.state == FREE
    if inflation <= 0:
        return free
    blocked = ~free
    grown = blocked.copy()
    rows, cols = free.shape
    for dr in range(-inflation, inflation + 1):
        for dc in range(-inflation, inflation + 1):
            if dr * dr + dc * dc > inflation * inflation:
                continue
            src = blocked[max(0, -dr):rows - max(0, dr), max(0, -dc):cols - max(0, dc)]
            grown[max(0, dr):rows - max(0, -dr), max(0, dc):cols - max(0, -dc)] |= src
    return ~grown


def neighbors(free: np.ndarray, cell: Cell):
    """Yield (next cell, is_diagonal) for legal moves out of ``cell``."""
    rows, cols = free.shape
    r, c = cell
    for dr, dc in MOVES:
        nr, nc = r + dr, c + dc
        if not (0 <= nr < rows and 0 <= nc < cols and free[nr, nc]):
            continue
        diag = dr != 0 and dc != 0
        if diag and not (free[r + dr, c] and free[r, c + dc]):
            continue
        yield (nr, nc), diag


def path_cost(orth: int, diag: int, cell_size: float) -> float:
    """Canonical metric cost of a path with the given step counts."""
    return (orth + diag * SQRT2) * cell_size


def _resolve(grid: OccupancyGrid, query: NavQuery) -> Cell:
    if query.start is not None:
        return tuple(int(v) for v in query.start)
    if query.start_xy is not None:
        return grid.cell_of(query.start_xy)
    raise ConfigError("query has no start")


def astar(grid: OccupancyGrid, start: Cell, goal: Cell, inflation: int = 0,
          debug: bool = False) -> NavPath:
    """Cost-minimal 8-connected path from ``start`` to ``goal``.

    With ``debug=True`` every expanded node is checked against exact
    cost-to-go from a reverse Dijkstra to confirm the heuristic never
    overestimates.
    """
    free = traversable(grid, inflation)
    start, goal = tuple(start), tuple(goal)
    for name, cell in (("start", start), ("goal", goal)):
        if not (grid.in_bounds(cell) and free[cell]):
            raise BlockedEndpoint(f"{name} cell {cell} is not free")
    exact = dijkstra_costs(free, goal) if debug else None

    def h(cell: Cell) -> float:
        return math.hypot(cell[0] - goal[0], cell[1] - goal[1])

    # entries: (f, g, tie counter, cell, orth, diag); costs in cell units
    counter = 0
    frontier = [(h(start), 0.0, counter, start, 0, 0)]
    best = {start: 0.0}
    parent: dict[Cell, Cell | None] = {start: None}
    steps = {start: (0, 0)}
    closed = set()
    expanded = 0
    while frontier:
        _, g, _, cell, orth, diag = heapq.heappop(frontier)
        if cell in closed:
            continue
        closed.add(cell)
        expanded += 1
        if exact is not None and h(cell) > exact.get(cell, math.inf) + 1e-9:
            raise InvariantViolation(f"heuristic overestimates at {cell}")
        if cell == goal:
            cells = [cell]
            while parent[cells[-1]] is not None:
                cells.append(parent[cells[-1]])
            cells.reverse()
            o, d = steps[goal]
            return NavPath(cells, path_cost(o, d, grid.cell_size), o, d,
                           {"expanded": expanded})
        for nxt, is_diag in neighbors(free, cell):
            if nxt in closed:
                continue
            ng = g + (SQRT2 if is_diag else 1.0)
            if ng < best.get(nxt, math.inf):
                best[nxt] = ng
                parent[nxt] = cell
                steps[nxt] = (orth, diag + 1) if is_diag else (orth + 1, diag)
                counter += 1
                heapq.heappush(frontier, (ng + h(nxt), ng, counter, nxt, *steps[nxt]))
    raise NoPath(f"no free-space path from {start} to {goal}")


def dijkstra_costs(free: np.ndarray, source: Cell) -> dict[Cell, float]:
    """Exact cost (cell units) from ``source`` to every reachable cell.

    Moves are symmetric, so this is also the cost-to-go towards ``source``.
    """
    dist = {source: 0.0}
    heap = [(0.0, source)]
    done = set()
    while heap:
        d, cell = heapq.heappop(heap)
        if cell in done:
            continue
        done.add(cell)
        for nxt, is_diag in neighbors(free, cell):
            nd = d + (SQRT2 if is_diag else 1.0)
            if nd < dist.get(nxt, math.inf):
                dist[nxt] = nd
                heapq.heappush(heap, (nd, nxt))
    return dist


def select_goal(grid: OccupancyGrid, query: NavQuery, inflation: int = 0) -> tuple[Cell, Cell]:
    """Return ``(goal, affordance_cell)`` for a query.

    The affordance cell maximizes the number of recorded points carrying the
    verb; ties go to the cell nearest the start, then the lowest row-major
    index. The goal is the free cell reachable from the start that lies
    nearest that affordance cell (itself if possible), ties again by
    distance to start then row-major index.
    """
    if query.verb not in grid.classes:
        raise AffordanceNotFound(f"verb {query.verb!r} is not in the map vocabulary")
    k = grid.classes.index(query.verb)
    counts = grid.class_counts[:, :, k]
    rows, cols = np.nonzero(counts)
    cand = list(zip(rows.tolist(), cols.tolist()))
    if query.object is not None:
        cand = [c for c in cand if query.object in grid.objects.get(c, ())]
    if not cand:
        what = query.verb if query.object is None else f"{query.verb} {query.object}"
        raise AffordanceNotFound(f"no map cell carries {what!r}")
    start = _resolve(grid, query)

    def dist(a: Cell, b: Cell) -> float:
        return math.hypot(a[0] - b[0], a[1] - b[1])

    aff = min(cand, key=lambda c: (-int(counts[c]), dist(c, start), c[0] * grid.cols + c[1]))
    free = traversable(grid, inflation)
    if not (grid.in_bounds(start) and free[start]):
        raise BlockedEndpoint(f"start cell {start} is not free")
    # only cells connected to the start can serve as a goal
    reach = np.zeros_like(free)
    for cell in dijkstra_costs(free, start):
        reach[cell] = True
    fr, fc = np.nonzero(reach)
    d_aff = np.hypot(fr - aff[0], fc - aff[1])
    d_start = np.hypot(fr - start[0], fc - start[1])
    order = np.lexsort((fr * grid.cols + fc, d_start, d_aff))
    i = order[0]
    return (int(fr[i]), int(fc[i])), aff


def navigate(grid: OccupancyGrid, query: NavQuery, inflation: int = 0) -> NavPath:
    start = _resolve(grid, query)
    goal, aff = select_goal(grid, query, inflation)
    path = astar(grid, start, goal, inflation)
    path.trace = {
        "query": {"verb": query.verb, "object": query.object},
        "start": list(start), "goal": list(goal), "affordance_cell": list(aff),
        "expanded": path.trace.get("expanded", 0),
        "cells": [list(c) for c in path.cells], "cost_m": path.cost_m,
    }
    return path


def validate_path(grid: OccupancyGrid, path: NavPath, inflation: int = 0) -> None:
    """Raise InvariantViolation unless the path is a legal, correctly costed walk."""
    free = traversable(grid, inflation)
    orth = diag = 0
    for cell in path.cells:
        if not (grid.in_bounds(cell) and free[cell]):
            raise InvariantViolation(f"path visits non-free cell {cell}")
    for a, b in zip(path.cells, path.cells[1:]):
        legal = dict(neighbors(free, a))
        if tuple(b) not in legal:
            raise InvariantViolation(f"illegal step {a} -> {b}")
        if legal[tuple(b)]:
            diag += 1
        else:
            orth += 1
    if path.cost_m != path_cost(orth, diag, grid.cell_size):
        raise InvariantViolation("path cost does not equal the sum of its steps")


def overlay_image(grid: OccupancyGrid, cells: Sequence[Cell], base: np.ndarray) -> np.ndarray:
    """Grayscale overlay: path 128, start 64, goal 32 on top of ``base``."""
    img = base.copy()
    for c in cells:
        img[tuple(c)] = 128
    if cells:
        img[tuple(cells[0])] = 64
        img[tuple(cells[-1])] = 32
    return img
