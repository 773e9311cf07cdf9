"""Procedural household gridworlds with partial observability.

Scenes are square grids partitioned into rooms by walls (one door per
wall).  Anchor objects land in rooms of their type; target objects land
near an anchor sampled from the scene's placement table, falling back to a
uniform free cell.  Agents observe through line-of-sight raycasts within a
Chebyshev radius and accumulate a semantic map containing only what they
have actually seen.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .maps import MetricMap

ACTIONS = ("up", "down", "left", "right", "stop")
_DELTAS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1), "stop": (0, 0)}

# 8 compass bins for the displacement histogram, clockwise from north.
_COMPASS = {(-1, 0): 0, (-1, 1): 1, (0, 1): 2, (1, 1): 3,
            (1, 0): 4, (1, -1): 5, (0, -1): 6, (-1, -1): 7}

TEMPORAL_DIM = 2 + len(_COMPASS)  # progress, observed fraction, 8 direction bins


@dataclass(frozen=True)
class SceneConfig:
    vocabulary: tuple[str, ...]
    anchor_rooms: dict[str, str]
    placement: dict[str, tuple[tuple[str, float], ...]]
    size: int = 64
    rooms: int = 4
    room_types: tuple[str, ...] = ("kitchen", "living", "bedroom", "bath")
    r_place: int = 3
    r_view: int = 5
    min_room_side: int = 8

    def validate(self, embedding_table=None) -> None:
        if self.size < 32:
            raise ValueError(f"size must be >= 32, got {self.size}")
        if self.rooms < 2:
            raise ValueError(f"rooms must be >= 2, got {self.rooms}")
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ValueError("vocabulary entries must be unique")
        vocab = set(self.vocabulary)
        for anchor, room in self.anchor_rooms.items():
            if anchor not in vocab:
                raise ValueError(f"anchor {anchor!r} not in vocabulary")
            if room not in self.room_types:
                raise ValueError(f"unknown room type {room!r} for anchor {anchor!r}")
        for target, anchors in self.placement.items():
            if target not in vocab:
                raise ValueError(f"target {target!r} not in vocabulary")
            total = 0.0
            for anchor, prob in anchors:
                if anchor not in self.anchor_rooms:
                    raise ValueError(f"placement anchor {anchor!r} for {target!r} is not an anchor")
                if not 0.0 <= prob <= 1.0:
                    raise ValueError(f"placement probability {prob} for {target!r} out of range")
                total += prob
            if total > 1.0 + 1e-9:
                raise ValueError(f"placement probabilities for {target!r} sum to {total} > 1")
        if embedding_table is not None:
            missing = [v for v in self.vocabulary if v not in embedding_table]
            if missing:
                raise ValueError(f"vocabulary missing from embedding table: {missing}")


@dataclass
class Scene:
    config: SceneConfig
    seed: int
    occupancy: np.ndarray            # bool (R, R), True = blocked
    room_labels: np.ndarray          # int16 (R, R), -1 on walls/doors
    object_cells: dict[str, tuple[tuple[int, int], ...]]
    truth_affinity: dict[str, tuple[tuple[str, float], ...]]
    cell_to_channel: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.occupancy.shape[0]

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return self.config.vocabulary

    def free_cells(self) -> np.ndarray:
        return np.argwhere(~self.occupancy)

    def target_cells(self, category: str) -> tuple[tuple[int, int], ...]:
        return self.object_cells.get(category, ())


def _split_regions(rng: np.random.Generator, size: int, rooms: int, min_side: int):
    """Partition the interior into rectangular rooms, one door per wall."""
    regions = [(1, 1, size - 2, size - 2)]
    walls: list[tuple[int, int]] = []
    while len(regions) < rooms:
        candidates = []
        for idx, (r0, c0, r1, c1) in enumerate(regions):
            if r1 - r0 + 1 >= 2 * min_side + 1 or c1 - c0 + 1 >= 2 * min_side + 1:
                candidates.append(idx)
        if not candidates:
            raise ValueError(
                f"cannot split {rooms} rooms of side >= {min_side} into a {size}x{size} grid"
            )
        areas = [(regions[i][2] - regions[i][0] + 1) * (regions[i][3] - regions[i][1] + 1)
                 for i in candidates]
        idx = candidates[int(np.argmax(areas))]
        r0, c0, r1, c1 = regions.pop(idx)
        tall = (r1 - r0) >= (c1 - c0)
        if tall and r1 - r0 + 1 >= 2 * min_side + 1:
            w = int(rng.integers(r0 + min_side, r1 - min_side + 1))
            door = int(rng.integers(c0, c1 + 1))
            walls.extend((w, c) for c in range(c0, c1 + 1) if c != door)
            regions.extend([(r0, c0, w - 1, c1), (w + 1, c0, r1, c1)])
        else:
            w = int(rng.integers(c0 + min_side, c1 - min_side + 1))
            door = int(rng.integers(r0, r1 + 1))
            walls.extend((r, w) for r in range(r0, r1 + 1) if r != door)
            regions.extend([(r0, c0, r1, w - 1), (r0, w + 1, r1, c1)])
    return regions, walls


def _flood_count(passable: np.ndarray, start: tuple[int, int]) -> int:
    size = passable.shape[0]
    seen = np.zeros_like(passable)
    queue = deque([start])
    seen[start] = True
    count = 0
    while queue:
        r, c = queue.popleft()
        count += 1
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < size and 0 <= nc < size and passable[nr, nc] and not seen[nr, nc]:
                seen[nr, nc] = True
                queue.append((nr, nc))
    return count


def _component_labels(passable: np.ndarray) -> np.ndarray:
    size = passable.shape[0]
    labels = np.full(passable.shape, -1, dtype=np.int32)
    current = 0
    for sr in range(size):
        for sc in range(size):
            if passable[sr, sc] and labels[sr, sc] < 0:
                labels[sr, sc] = current
                queue = deque([(sr, sc)])
                while queue:
                    r, c = queue.popleft()
                    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                        nr, nc = r + dr, c + dc
                        if (0 <= nr < size and 0 <= nc < size
                                and passable[nr, nc] and labels[nr, nc] < 0):
                            labels[nr, nc] = current
                            queue.append((nr, nc))
                current += 1
    return labels


def _repair_connectivity(occupancy: np.ndarray) -> None:
    """Carve doors through interior walls until all free space is one component.

    A child room's wall can land on a parent wall's door cell and seal it;
    this pass deterministically knocks extra doors (first separating wall
    cell in row-major order) until the free space is connected.
    """
    size = occupancy.shape[0]
    while True:
        labels = _component_labels(~occupancy)
        if labels.max() <= 0:
            return
        carved = False
        for r in range(1, size - 1):
            for c in range(1, size - 1):
                if not occupancy[r, c]:
                    continue
                neighbors = {labels[r + dr, c + dc]
                             for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))}
                neighbors.discard(-1)
                if len(neighbors) >= 2:
                    occupancy[r, c] = False
                    carved = True
                    break
            if carved:
                break
        if not carved:
            raise RuntimeError("free space disconnected and no separating wall found")


def generate_scene(config: SceneConfig, rng_seed: int) -> Scene:
    """Deterministic scene synthesis from a config and a seed."""
    config.validate()
    rng = np.random.default_rng(rng_seed)
    size = config.size
    occupancy = np.zeros((size, size), dtype=bool)
    occupancy[0, :] = occupancy[-1, :] = occupancy[:, 0] = occupancy[:, -1] = True

    regions, walls = _split_regions(rng, size, config.rooms, config.min_room_side)
    for r, c in walls:
        occupancy[r, c] = True
    _repair_connectivity(occupancy)

    room_labels = np.full((size, size), -1, dtype=np.int16)
    for room_id, (r0, c0, r1, c1) in enumerate(regions):
        room_labels[r0:r1 + 1, c0:c1 + 1] = room_id

    type_order = rng.permutation(len(regions))
    room_type = {room_id: config.room_types[type_order[room_id] % len(config.room_types)]
                 for room_id in range(len(regions))}
    rooms_by_type: dict[str, list[int]] = {}
    for room_id, rtype in room_type.items():
        rooms_by_type.setdefault(rtype, []).append(room_id)

    object_cells: dict[str, tuple[tuple[int, int], ...]] = {}
    used: set[tuple[int, int]] = set()

    def sample_free_cell(mask: np.ndarray):
        cells = np.argwhere(mask & ~occupancy)
        cells = [tuple(map(int, rc)) for rc in cells if tuple(map(int, rc)) not in used]
        if not cells:
            return None
        return cells[int(rng.integers(len(cells)))]

    for anchor in sorted(config.anchor_rooms):
        room_ids = rooms_by_type.get(config.anchor_rooms[anchor]) or list(range(len(regions)))
        room_id = room_ids[int(rng.integers(len(room_ids)))]
        cell = sample_free_cell(room_labels == room_id)
        if cell is None:
            cell = sample_free_cell(np.ones_like(occupancy))
        if cell is None:
            raise ValueError("not enough free space to place anchors")
        used.add(cell)
        object_cells[anchor] = (cell,)

    everywhere = np.ones_like(occupancy)
    for target in sorted(config.placement):
        u = float(rng.random())
        cumulative = 0.0
        chosen_anchor = None
        for anchor, prob in config.placement[target]:
            cumulative += prob
            if u < cumulative:
                chosen_anchor = anchor
                break
        cell = None
        if chosen_anchor is not None and chosen_anchor in object_cells:
            ar, ac = object_cells[chosen_anchor][0]
            near = np.zeros_like(occupancy)
            r = config.r_place
            near[max(0, ar - r):ar + r + 1, max(0, ac - r):ac + r + 1] = True
            cell = sample_free_cell(near)
        if cell is None:
            cell = sample_free_cell(everywhere)
        if cell is None:
            raise ValueError(f"no free cell left for target {target!r}")
        used.add(cell)
        object_cells[target] = (cell,)

    free = np.argwhere(~occupancy)
    if _flood_count(~occupancy, tuple(map(int, free[0]))) != len(free):
        raise RuntimeError(f"scene seed {rng_seed}: free space is not connected")

    channel_index = {name: i for i, name in enumerate(config.vocabulary)}
    cell_to_channel = {}
    for name, cells in object_cells.items():
        for cell in cells:
            cell_to_channel[cell] = channel_index[name]

    occupancy.setflags(write=False)
    room_labels.setflags(write=False)
    return Scene(
        config=config,
        seed=rng_seed,
        occupancy=occupancy,
        room_labels=room_labels,
        object_cells=object_cells,
        truth_affinity=dict(config.placement),
        cell_to_channel=cell_to_channel,
    )


# ---------------------------------------------------------------------------
# Agent state and observation


@dataclass
class AgentState:
    position: tuple[int, int]
    steps_taken: int
    observed: np.ndarray             # bool (R, R)
    semantic_map: MetricMap
    trajectory: list[tuple[int, int]]


def new_agent(scene: Scene, start: tuple[int, int]) -> AgentState:
    if scene.occupancy[start]:
        raise ValueError(f"start cell {start} is blocked")
    size = scene.size
    grid = np.zeros((len(scene.vocabulary), size, size))
    return AgentState(
        position=(int(start[0]), int(start[1])),
        steps_taken=0,
        observed=np.zeros((size, size), dtype=bool),
        semantic_map=MetricMap(scene.vocabulary, grid),
        trajectory=[(int(start[0]), int(start[1]))],
    )


def _bresenham_chain(dr: int, dc: int) -> tuple[tuple[int, int], ...]:
    """Intermediate offsets on the grid line from (0,0) to (dr,dc)."""
    points = []
    r, c = 0, 0
    n_steps = max(abs(dr), abs(dc))
    err_r, err_c = 0, 0
    for _ in range(n_steps):
        err_r += abs(dr)
        err_c += abs(dc)
        if 2 * err_r >= n_steps:
            r += 1 if dr > 0 else -1 if dr < 0 else 0
            err_r -= n_steps
        if 2 * err_c >= n_steps:
            c += 1 if dc > 0 else -1 if dc < 0 else 0
            err_c -= n_steps
        points.append((r, c))
    return tuple(points[:-1])  # exclude the endpoint


_VIS_TABLE_CACHE: dict[int, tuple] = {}


def _visibility_table(r_view: int):
    table = _VIS_TABLE_CACHE.get(r_view)
    if table is None:
        rows = []
        for dr in range(-r_view, r_view + 1):
            for dc in range(-r_view, r_view + 1):
                if dr == 0 and dc == 0:
                    continue
                rows.append((dr, dc, _bresenham_chain(dr, dc)))
        table = tuple(rows)
        _VIS_TABLE_CACHE[r_view] = table
    return table


def visible_cells(scene: Scene, position: tuple[int, int]) -> list[tuple[int, int]]:
    """Cells within the view radius with unblocked line of sight."""
    size = scene.size
    occ = scene.occupancy
    pr, pc = position
    out = [position]
    for dr, dc, chain in _visibility_table(scene.config.r_view):
        r, c = pr + dr, pc + dc
        if not (0 <= r < size and 0 <= c < size):
            continue
        clear = True
        for ir, ic in chain:
            if occ[pr + ir, pc + ic]:
                clear = False
                break
        if clear:
            out.append((r, c))
    return out


def observe(scene: Scene, agent: AgentState,
            false_negative_rate: float = 0.0, rng: np.random.Generator | None = None) -> AgentState:
    """Mark line-of-sight cells observed and write seen objects into the map.

    An object cell missed once (false-negative stress mode) can still be
    picked up by a later observation of the same cell.
    """
    grid = agent.semantic_map.grid
    for cell in visible_cells(scene, agent.position):
        agent.observed[cell] = True
        channel = scene.cell_to_channel.get(cell)
        if channel is not None and grid[channel][cell] == 0.0:
            if false_negative_rate > 0.0 and rng is not None and rng.random() < false_negative_rate:
                continue
            grid[channel][cell] = 1.0
    return agent


def step(scene: Scene, agent: AgentState, action: str,
         false_negative_rate: float = 0.0, rng: np.random.Generator | None = None) -> AgentState:
    """Move one cell (blocked moves are no-ops), then re-observe."""
    if action not in _DELTAS:
        raise ValueError(f"unknown action {action!r}")
    dr, dc = _DELTAS[action]
    r, c = agent.position
    nr, nc = r + dr, c + dc
    if 0 <= nr < scene.size and 0 <= nc < scene.size and not scene.occupancy[nr, nc]:
        agent.position = (nr, nc)
    agent.steps_taken += 1
    agent.trajectory.append(agent.position)
    return observe(scene, agent, false_negative_rate, rng)


# ---------------------------------------------------------------------------
# Shortest paths


def bfs_distances(passable: np.ndarray, start: tuple[int, int],
                  goal: tuple[int, int] | None = None) -> np.ndarray:
    """4-connected BFS distance field; -1 where unreachable.

    Layered frontier propagation in numpy; optionally stops early once
    ``goal`` is labeled.
    """
    dist = np.full(passable.shape, -1, dtype=np.int32)
    if not passable[start]:
        return dist
    frontier = np.zeros(passable.shape, dtype=bool)
    frontier[start] = True
    open_cells = passable.copy()
    d = 0
    while frontier.any():
        dist[frontier] = d
        open_cells &= ~frontier
        if goal is not None and dist[goal] >= 0:
            return dist
        spread = np.zeros_like(frontier)
        spread[1:, :] |= frontier[:-1, :]
        spread[:-1, :] |= frontier[1:, :]
        spread[:, 1:] |= frontier[:, :-1]
        spread[:, :-1] |= frontier[:, 1:]
        frontier = spread & open_cells
        d += 1
    return dist


def bfs_path(passable: np.ndarray, start: tuple[int, int],
             goal: tuple[int, int]) -> list[tuple[int, int]] | None:
    """One shortest 4-connected path, or None when unreachable.

    Backtracks from the goal through strictly decreasing distances; the
    neighbor scan order is fixed, so the path is deterministic.
    """
    if start == goal:
        return [start]
    dist = bfs_distances(passable, start, goal=goal)
    if dist[goal] < 0:
        return None
    size = passable.shape[0]
    path = [goal]
    r, c = goal
    for d in range(int(dist[goal]) - 1, -1, -1):
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < size and 0 <= nc < size and dist[nr, nc] == d:
                r, c = nr, nc
                path.append((r, c))
                break
    return path[::-1]


def shortest_path(scene: Scene, src: tuple[int, int], dst: tuple[int, int]) -> int | None:
    """BFS distance between two unblocked cells; None when unreachable."""
    for cell in (src, dst):
        if scene.occupancy[cell]:
            raise ValueError(f"cell {cell} is blocked")
    d = bfs_distances(~scene.occupancy, src)[dst]
    return None if d < 0 else int(d)


# ---------------------------------------------------------------------------
# Fusion context


@dataclass(frozen=True)
class FusionContext:
    temporal: np.ndarray       # (10,)
    environmental: np.ndarray  # (2, R, R): observed mask, known obstacles


def build_fusion_context(agent: AgentState, scene: Scene, step_budget: int,
                         history_window: int = 32) -> FusionContext:
    """Trajectory statistics plus the explored/obstacle planes."""
    progress = agent.steps_taken / max(step_budget, 1)
    observed_fraction = float(agent.observed.mean())
    histogram = np.zeros(8)
    moves = [
        (r1 - r0, c1 - c0)
        for (r0, c0), (r1, c1) in zip(agent.trajectory[:-1], agent.trajectory[1:])
        if (r0, c0) != (r1, c1)
    ][-history_window:]
    for dr, dc in moves:
        histogram[_COMPASS[(int(np.sign(dr)), int(np.sign(dc)))]] += 1
    if moves:
        histogram /= len(moves)
    temporal = np.concatenate([[progress, observed_fraction], histogram])
    known_obstacles = agent.observed & scene.occupancy
    environmental = np.stack([
        agent.observed.astype(np.float64),
        known_obstacles.astype(np.float64),
    ])
    return FusionContext(temporal=temporal, environmental=environmental)


# ---------------------------------------------------------------------------
# Episodes


@dataclass
class Episode:
    scene_seed: int
    target: str
    start: tuple[int, int]
    trajectory: list[tuple[int, int]]
    success: bool
    goal_found: bool
    shortest_path_len: int
    mode: str = ""

    @property
    def path_len(self) -> int:
        return len(self.trajectory) - 1

    @property
    def steps(self) -> int:
        return len(self.trajectory) - 1
