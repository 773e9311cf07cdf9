import heapq

import numpy as np
import pytest

from loat.gridworld import (
    Scene,
    SceneConfig,
    bfs_distances,
    build_fusion_context,
    generate_scene,
    new_agent,
    observe,
    shortest_path,
    step,
)


def small_config(**overrides):
    defaults = dict(
        vocabulary=("Cup", "Shelf", "Sink"),
        anchor_rooms={"Shelf": "living", "Sink": "kitchen"},
        placement={"Cup": (("Sink", 1.0),)},
        size=32,
        rooms=2,
        min_room_side=8,
    )
    defaults.update(overrides)
    return SceneConfig(**defaults)


def astar(passable, start, goal):
    """Independent A* with Manhattan heuristic (admissible on unit grids)."""
    size = passable.shape[0]

    def h(cell):
        return abs(cell[0] - goal[0]) + abs(cell[1] - goal[1])

    open_heap = [(h(start), 0, start)]
    best = {start: 0}
    while open_heap:
        f, g, cell = heapq.heappop(open_heap)
        if cell == goal:
            return g
        if g > best.get(cell, float("inf")):
            continue
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nxt = (cell[0] + dr, cell[1] + dc)
            if 0 <= nxt[0] < size and 0 <= nxt[1] < size and passable[nxt]:
                ng = g + 1
                if ng < best.get(nxt, float("inf")):
                    best[nxt] = ng
                    heapq.heappush(open_heap, (ng + h(nxt), ng, nxt))
    return None


def hand_scene(occupancy, objects, vocabulary, r_view=5):
    """Build a Scene directly from an occupancy grid and object cells."""
    occupancy = np.asarray(occupancy, dtype=bool)
    config = SceneConfig(
        vocabulary=vocabulary,
        anchor_rooms={},
        placement={},
        size=max(32, occupancy.shape[0]),
        rooms=2,
        r_view=r_view,
    )
    index = {name: i for i, name in enumerate(vocabulary)}
    cell_to_channel = {cell: index[name] for name, cells in objects.items() for cell in cells}
    return Scene(
        config=config,
        seed=0,
        occupancy=occupancy,
        room_labels=np.full(occupancy.shape, -1, dtype=np.int16),
        object_cells={k: tuple(v) for k, v in objects.items()},
        truth_affinity={},
        cell_to_channel=cell_to_channel,
    )


def open_room(size=12):
    occ = np.zeros((size, size), dtype=bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    return occ


def test_generation_deterministic():
    config = small_config()
    a = generate_scene(config, 7)
    b = generate_scene(config, 7)
    np.testing.assert_array_equal(a.occupancy, b.occupancy)
    assert a.object_cells == b.object_cells
    np.testing.assert_array_equal(a.room_labels, b.room_labels)


def test_two_rooms_and_connectivity():
    scene = generate_scene(small_config(), 3)
    labels = set(np.unique(scene.room_labels)) - {-1}
    assert labels == {0, 1}
    free = np.argwhere(~scene.occupancy)
    # flood-fill oracle: all free cells mutually reachable
    dist = bfs_distances(~scene.occupancy, tuple(free[0]))
    assert np.all(dist[~scene.occupancy] >= 0)


def test_connectivity_over_100_seeds():
    config = small_config()
    for seed in range(100):
        scene = generate_scene(config, seed)
        free = np.argwhere(~scene.occupancy)
        dist = bfs_distances(~scene.occupancy, tuple(free[0]))
        assert np.all(dist[~scene.occupancy] >= 0), f"seed {seed} disconnected"


def test_placement_probability_one_lands_near_anchor():
    config = small_config()
    for seed in range(200):
        scene = generate_scene(config, seed)
        (cup,) = scene.object_cells["Cup"]
        (sink,) = scene.object_cells["Sink"]
        cheb = max(abs(cup[0] - sink[0]), abs(cup[1] - sink[1]))
        assert cheb <= config.r_place, f"seed {seed}: cup at {cup}, sink at {sink}"


def test_objects_on_free_cells():
    scene = generate_scene(small_config(), 11)
    for cells in scene.object_cells.values():
        for cell in cells:
            assert not scene.occupancy[cell]


def test_config_validation():
    with pytest.raises(ValueError, match="size"):
        small_config(size=16).validate()
    with pytest.raises(ValueError, match="rooms"):
        small_config(rooms=1).validate()
    with pytest.raises(ValueError, match="not in vocabulary"):
        small_config(placement={"Ghost": (("Sink", 1.0),)}).validate()
    with pytest.raises(ValueError, match="sum"):
        small_config(placement={"Cup": (("Sink", 0.7), ("Shelf", 0.7))}).validate()


def test_unsatisfiable_config():
    with pytest.raises(ValueError, match="cannot split"):
        generate_scene(small_config(rooms=40), 0)


def test_observe_adjacent_object():
    occ = open_room()
    scene = hand_scene(occ, {"Sink": [(5, 6)]}, ("Sink",))
    agent = new_agent(scene, (5, 5))
    observe(scene, agent)
    assert agent.semantic_map.grid[0, 5, 6] == 1.0
    assert agent.observed[5, 6]


def test_wall_blocks_line_of_sight():
    occ = open_room()
    occ[2:9, 5] = True  # vertical wall between agent and object
    scene = hand_scene(occ, {"Sink": [(5, 8)]}, ("Sink",))
    agent = new_agent(scene, (5, 2))
    observe(scene, agent)
    assert not agent.observed[5, 8]
    assert agent.semantic_map.grid[0, 5, 8] == 0.0
    # the wall itself is visible
    assert agent.observed[5, 5]


def test_observe_idempotent():
    occ = open_room()
    scene = hand_scene(occ, {"Sink": [(5, 6)]}, ("Sink",))
    agent = new_agent(scene, (5, 5))
    observe(scene, agent)
    observed = agent.observed.copy()
    grid = agent.semantic_map.grid.copy()
    observe(scene, agent)
    np.testing.assert_array_equal(agent.observed, observed)
    np.testing.assert_array_equal(agent.semantic_map.grid, grid)


def test_semantic_map_subset_of_truth():
    config = small_config()
    scene = generate_scene(config, 5)
    rng = np.random.default_rng(0)
    free = scene.free_cells()
    agent = new_agent(scene, tuple(free[0]))
    observe(scene, agent)
    for _ in range(60):
        step(scene, agent, ("up", "down", "left", "right")[rng.integers(4)])
    for ch, name in enumerate(scene.vocabulary):
        for rc in np.argwhere(agent.semantic_map.grid[ch] > 0):
            assert tuple(rc) in scene.object_cells.get(name, ())


def test_step_blocked_and_stop():
    occ = open_room()
    scene = hand_scene(occ, {}, ("Sink",))
    agent = new_agent(scene, (1, 1))
    step(scene, agent, "up")  # border wall above
    assert agent.position == (1, 1)
    assert agent.steps_taken == 1
    step(scene, agent, "stop")
    assert agent.position == (1, 1)
    step(scene, agent, "right")
    assert agent.position == (1, 2)
    with pytest.raises(ValueError, match="unknown action"):
        step(scene, agent, "teleport")


def test_observed_mask_monotone():
    scene = generate_scene(small_config(), 9)
    agent = new_agent(scene, tuple(scene.free_cells()[0]))
    observe(scene, agent)
    rng = np.random.default_rng(1)
    prev = agent.observed.copy()
    for _ in range(40):
        step(scene, agent, ("up", "down", "left", "right")[rng.integers(4)])
        assert np.all(agent.observed >= prev)
        prev = agent.observed.copy()


def test_shortest_path_basics():
    occ = open_room()
    scene = hand_scene(occ, {}, ("Sink",))
    assert shortest_path(scene, (3, 3), (3, 3)) == 0
    assert shortest_path(scene, (3, 1), (3, 6)) == 5
    with pytest.raises(ValueError, match="blocked"):
        shortest_path(scene, (0, 0), (3, 3))


def test_shortest_path_unreachable():
    occ = open_room()
    occ[4, 1:-1] = True  # full wall, no door
    scene = hand_scene(occ, {}, ("Sink",))
    assert shortest_path(scene, (2, 2), (6, 6)) is None


def test_bfs_matches_astar_oracle():
    config = small_config()
    rng = np.random.default_rng(2)
    for seed in range(20):
        scene = generate_scene(config, seed)
        free = scene.free_cells()
        a = tuple(free[rng.integers(len(free))])
        b = tuple(free[rng.integers(len(free))])
        bfs = shortest_path(scene, a, b)
        ast = astar(~scene.occupancy, a, b)
        assert bfs == ast


def test_fusion_context_initial():
    occ = open_room()
    scene = hand_scene(occ, {}, ("Sink",))
    agent = new_agent(scene, (5, 5))
    observe(scene, agent)
    ctx = build_fusion_context(agent, scene, step_budget=100)
    assert ctx.temporal.shape == (10,)
    assert ctx.temporal[0] == 0.0
    assert ctx.temporal[1] == pytest.approx(agent.observed.mean())
    np.testing.assert_array_equal(ctx.temporal[2:], np.zeros(8))
    assert ctx.environmental.shape == (2, 12, 12)


def test_fusion_context_full_observation():
    occ = open_room()
    scene = hand_scene(occ, {}, ("Sink",), r_view=20)
    agent = new_agent(scene, (5, 5))
    observe(scene, agent)
    ctx = build_fusion_context(agent, scene, step_budget=10)
    assert ctx.temporal[1] == pytest.approx(1.0)


def test_fusion_context_displacement_histogram():
    occ = np.zeros((32, 32), dtype=bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    scene = hand_scene(occ, {}, ("Sink",))
    agent = new_agent(scene, (16, 2))
    observe(scene, agent)
    for _ in range(10):
        step(scene, agent, "right")
    ctx = build_fusion_context(agent, scene, step_budget=100)
    hist = ctx.temporal[2:]
    assert hist[2] == pytest.approx(1.0)  # east bin
    assert hist.sum() == pytest.approx(1.0)
