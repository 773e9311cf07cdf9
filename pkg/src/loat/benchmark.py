"""Desk-scale household benchmark: vocabulary, placement statistics, splits.

The map vocabulary mixes large anchor objects (one channel each) with the
small target objects agents search for.  Training scenes place targets
near anchors drawn from the training placement table; the shifted split
re-draws each target's anchors from its generalized relevance set, so
commonsense knowledge stays valid while learned co-occurrences mislead.
Held-out targets never appear as navigation goals during training.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .affinity import GeneralizedTable, load_generalized_table
from .embeddings import EmbeddingTable, load_table
from .gridworld import SceneConfig

ANCHOR_ROOMS = {
    "Sink": "kitchen", "Stove": "kitchen", "Fridge": "kitchen", "Cabinet": "kitchen",
    "Sofa": "living", "CoffeeTable": "living", "Shelf": "living",
    "Bed": "bedroom", "Desk": "bedroom",
    "Bathtub": "bath",
}

TRAIN_TARGETS = ("Book", "Bowl", "Cup", "Laptop")
HELDOUT_TARGETS = ("Apple", "Knife")

VOCABULARY = tuple(sorted(tuple(ANCHOR_ROOMS) + TRAIN_TARGETS + HELDOUT_TARGETS))

# Training placement: a strong head pair plus a thin tail over the rest of
# each target's generalized relevance set.  The tail keeps the training
# distribution heterogeneous, so commonsense guidance carries signal even
# on familiar scenes, while experiential learning favors the head anchors.
TRAIN_PLACEMENT = {
    "Book": (("Shelf", 0.45), ("Desk", 0.25), ("Bed", 0.1), ("CoffeeTable", 0.1), ("Sofa", 0.1)),
    "Bowl": (("Stove", 0.45), ("Sink", 0.25), ("Cabinet", 0.1), ("Fridge", 0.1), ("Shelf", 0.1)),
    "Cup": (("Sink", 0.45), ("Cabinet", 0.25), ("CoffeeTable", 0.1), ("Desk", 0.1), ("Shelf", 0.1)),
    "Laptop": (("Desk", 0.45), ("Sofa", 0.25), ("Bed", 0.1), ("CoffeeTable", 0.1), ("Shelf", 0.1)),
}

HELDOUT_PLACEMENT = {
    "Apple": (("Fridge", 0.45), ("Sink", 0.25), ("Cabinet", 0.1), ("CoffeeTable", 0.1), ("Stove", 0.1)),
    "Knife": (("Stove", 0.45), ("Cabinet", 0.25), ("Fridge", 0.1), ("Shelf", 0.1), ("Sink", 0.1)),
}

# Episode seed bases, fixed and published: evaluation scenes never overlap
# the training scene seeds (0 .. n_train_scenes - 1).
SEEN_SCENE_BASE = 50_000
SHIFTED_SCENE_BASE = 60_000
START_SEED_TAG = 9

DEFAULT_STEP_BUDGET = 300
DEFAULT_K_REPLAN = 5
DEFAULT_R_SUCC = 1

OOD_TARGETS = ("Umbrella", "HairDrier", "Scissors", "Toothbrush", "Comb",
               "Peach", "CanOpener", "Whisk", "Magazine", "Eyeglasses")


def bundled_embedding_table() -> EmbeddingTable:
    path = resources.files("loat.data").joinpath("embeddings_desk.json")
    with resources.as_file(path) as p:
        return load_table(p)


def bundled_generalized_table() -> GeneralizedTable:
    path = resources.files("loat.data").joinpath("relevance_household.json")
    with resources.as_file(path) as p:
        return load_generalized_table(p)


def desk_scene_config(placement=None, size: int = 64, rooms: int = 4,
                      r_view: int = 5) -> SceneConfig:
    return SceneConfig(
        vocabulary=VOCABULARY,
        anchor_rooms=dict(ANCHOR_ROOMS),
        placement=dict(placement if placement is not None else TRAIN_PLACEMENT),
        size=size,
        rooms=rooms,
        r_view=r_view,
    )


def shift_placement(placement, relevance: GeneralizedTable, fraction: float,
                    seed: int):
    """Move each chosen target's mass onto the generalized-set anchors it
    trained on least.

    Replacement anchors come from the target's relevance set, so LLM
    knowledge stays informative on the shifted split while learned
    co-occurrence statistics point the wrong way.
    """
    rng = np.random.default_rng(seed)
    shifted = {}
    for target in sorted(placement):
        anchors = placement[target]
        if rng.random() >= fraction:
            shifted[target] = anchors
            continue
        trained_prob = {a: p for a, p in anchors}
        pool = sorted(set(relevance.related(target)) & set(ANCHOR_ROOMS))
        if not pool:
            shifted[target] = anchors
            continue
        order = list(rng.permutation(pool))
        order.sort(key=lambda a: trained_prob.get(a, 0.0))
        picks = order[:2]
        if len(picks) == 2:
            shifted[target] = ((str(picks[0]), 0.6), (str(picks[1]), 0.35))
        else:
            shifted[target] = ((str(picks[0]), 0.95),)
    return shifted


@dataclass(frozen=True)
class SplitSpec:
    """An evaluation split: placement statistics plus episode seeds."""

    name: str
    placement: dict
    targets: tuple[str, ...]
    scene_seed_base: int


def seen_split() -> SplitSpec:
    return SplitSpec(
        name="seen",
        placement=dict(TRAIN_PLACEMENT),
        targets=TRAIN_TARGETS,
        scene_seed_base=SEEN_SCENE_BASE,
    )


def shifted_split(relevance: GeneralizedTable, fraction: float = 1.0,
                  seed: int = 777) -> SplitSpec:
    base = dict(TRAIN_PLACEMENT)
    base.update(HELDOUT_PLACEMENT)
    return SplitSpec(
        name="shifted",
        placement=shift_placement(base, relevance, fraction, seed),
        targets=tuple(sorted(TRAIN_TARGETS + HELDOUT_TARGETS)),
        scene_seed_base=SHIFTED_SCENE_BASE,
    )


@dataclass(frozen=True)
class EpisodeSpec:
    scene_seed: int
    target: str
    start: tuple[int, int]


def episode_specs(split: SplitSpec, n_episodes: int, scene_config: SceneConfig,
                  scenes: dict | None = None) -> list[EpisodeSpec]:
    """Paired-seed episode list; identical across ablation rows.

    ``scenes`` may be passed to reuse generated scenes across rows (it is
    filled as a side effect keyed by scene seed).
    """
    from .gridworld import generate_scene

    specs = []
    for i in range(n_episodes):
        scene_seed = split.scene_seed_base + i
        target = split.targets[i % len(split.targets)]
        if scenes is not None and scene_seed in scenes:
            scene = scenes[scene_seed]
        else:
            scene = generate_scene(scene_config, scene_seed)
            if scenes is not None:
                scenes[scene_seed] = scene
        rng = np.random.default_rng([START_SEED_TAG, scene_seed, i])
        free = scene.free_cells()
        start = tuple(map(int, free[int(rng.integers(len(free)))]))
        specs.append(EpisodeSpec(scene_seed=scene_seed, target=target, start=start))
    return specs
