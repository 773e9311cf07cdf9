"""Two-phase training of the affinity-activated target predictor.

Phase 1 trains the experiential attention projections jointly with the
predictor on partial-map snapshots, minimizing per-cell cross-entropy
against the true target cell.  Phase 2 freezes everything from phase 1,
introduces the generalized affinities, and trains only the fusion network
that produces the guidance ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .affinity import (
    AffinityQuery,
    ExperientialParams,
    GeneralizedTable,
    experiential_scores,
    generalized_scores,
)
from .embeddings import EmbeddingTable, embed
from .gridworld import (
    FusionContext,
    Scene,
    SceneConfig,
    build_fusion_context,
    generate_scene,
    new_agent,
    observe,
    step,
)
from .policy import FusionNet, TargetPredictor, make_fusion_net, make_target_predictor


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    d_k: int = 64
    lr_phase1: float = 3e-3
    lr_phase2: float = 3e-3
    epochs_phase1: int = 8
    epochs_phase2: int = 4
    batch_size: int = 8
    n_train_scenes: int = 200
    n_val_scenes: int = 50
    predictor_hidden: int = 8
    temporal_hidden: int = 16
    head_hidden: int = 16
    prefix_max: int = 60
    label_sigma: float = 0.0  # > 0 smooths one-hot labels with a Gaussian
    optimizer: str = "adam"   # "adam" or plain "sgd"

    def __post_init__(self):
        for name in ("lr_phase1", "lr_phase2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("d_k", "epochs_phase1", "epochs_phase2", "batch_size",
                     "n_train_scenes", "predictor_hidden", "prefix_max"):
            if getattr(self, name) < (0 if "prefix" in name or "epochs" in name else 1):
                raise ValueError(f"{name} must be positive")


@dataclass
class Sample:
    """One partial-exploration snapshot with its target-cell label.

    Planes are stored in compact integer/bool form; forward passes
    convert to float64 on the fly.
    """

    scene_seed: int
    target: str
    map_grid: np.ndarray         # uint8 (M, R, R), values {0, 1}
    observed: np.ndarray         # bool (R, R)
    known_obstacles: np.ndarray  # bool (R, R)
    temporal: np.ndarray         # (10,)
    label_cell: tuple[int, int]

    def label_index(self, size: int) -> int:
        return self.label_cell[0] * size + self.label_cell[1]

    def context(self) -> FusionContext:
        return FusionContext(
            temporal=self.temporal,
            environmental=np.stack([
                self.observed.astype(np.float64),
                self.known_obstacles.astype(np.float64),
            ]),
        )


@dataclass
class LossRecord:
    step: int
    phase: int
    loss: float


def make_dataset(scene_config: SceneConfig, targets, n_scenes: int, seed: int,
                 prefix_max: int = 60, scene_seed_base: int = 0) -> list[Sample]:
    """Partial-map snapshots from random-walk exploration prefixes.

    The queried target's own channel is blanked in every snapshot (and the
    label cell marked unobserved): downstream navigation only consults the
    predictor while the target is still missing from the map, so training
    mirrors that regime and the predictor must infer location from the
    surrounding anchors.
    """
    samples: list[Sample] = []
    for i in range(n_scenes):
        scene_seed = scene_seed_base + i
        scene = generate_scene(scene_config, scene_seed)
        rng = np.random.default_rng([seed, scene_seed])
        free = scene.free_cells()
        for target in targets:
            cells = scene.target_cells(target)
            if not cells:
                raise ValueError(f"target {target!r} was not placed in scene {scene_seed}")
            start = tuple(map(int, free[int(rng.integers(len(free)))]))
            agent = new_agent(scene, start)
            observe(scene, agent)
            walk_len = int(rng.integers(0, prefix_max + 1))
            for _ in range(walk_len):
                action = ("up", "down", "left", "right")[int(rng.integers(4))]
                step(scene, agent, action)
            ctx = build_fusion_context(agent, scene, step_budget=max(prefix_max, 1))
            map_grid = agent.semantic_map.grid.astype(np.uint8)
            observed = agent.observed.copy()
            map_grid[scene.vocabulary.index(target)] = 0
            observed[cells[0]] = False
            samples.append(Sample(
                scene_seed=scene_seed,
                target=target,
                map_grid=map_grid,
                observed=observed,
                known_obstacles=agent.observed & scene.occupancy,
                temporal=ctx.temporal,
                label_cell=cells[0],
            ))
    return samples


def exhaustive_sample(scene: Scene, target: str) -> Sample:
    """Fully-observed snapshot of a scene: the exploration limit case.

    Useful as an overfit sanity dataset and for probing a trained
    predictor without running exploration.
    """
    cells = scene.target_cells(target)
    if not cells:
        raise ValueError(f"target {target!r} was not placed in scene {scene.seed}")
    size = scene.size
    grid = np.zeros((len(scene.vocabulary), size, size), dtype=np.uint8)
    for cell, channel in scene.cell_to_channel.items():
        grid[channel][cell] = 1
    observed = np.ones((size, size), dtype=bool)
    temporal = np.zeros(10)
    temporal[0] = 1.0
    temporal[1] = 1.0
    return Sample(
        scene_seed=scene.seed,
        target=target,
        map_grid=grid,
        observed=observed,
        known_obstacles=scene.occupancy.copy(),
        temporal=temporal,
        label_cell=cells[0],
    )


def _label_distribution(sample: Sample, size: int, sigma: float) -> np.ndarray | None:
    if sigma <= 0:
        return None
    rr, cc = np.mgrid[0:size, 0:size]
    lr, lc = sample.label_cell
    d2 = (rr - lr) ** 2 + (cc - lc) ** 2
    dist = np.exp(-d2 / (2.0 * sigma * sigma)).reshape(-1)
    return dist / dist.sum()


def _experiential_score_var(w_q: nn.Var, w_k: nn.Var, e_target: np.ndarray,
                            e_objects: np.ndarray) -> nn.Var:
    """Differentiable scaled dot-product attention over the map vocabulary."""
    d_k = w_q.value.shape[0]
    q = nn.matvec(w_q, nn.Var(e_target))
    keys = nn.matmat(nn.Var(e_objects), nn.transpose(w_k))
    logits = nn.scale(nn.matvec(keys, q), 1.0 / math.sqrt(d_k))
    return nn.softmax(logits)


def _prediction_loss(predictor: TargetPredictor, scores: nn.Var, sample: Sample,
                     label_dist: np.ndarray | None) -> nn.Var:
    m = scores.value.shape[0]
    activated = nn.mul(nn.reshape(scores, (m, 1, 1)), nn.Var(sample.map_grid))
    x = nn.concat([activated, nn.Var(sample.observed[None].astype(np.float64))])
    logits = nn.flatten(predictor.forward(x))
    if label_dist is None:
        return nn.softmax_cross_entropy(logits, sample.label_index(sample.observed.shape[0]))
    return nn.scale(nn.dot(nn.Var(label_dist), nn.log_softmax(logits)), -1.0)


def _zero_grads(params: dict[str, nn.Var]) -> None:
    for var in params.values():
        var.grad = None


def _apply_step(params: dict[str, nn.Var], lr: float, batch_size: int,
                optimizer: str, state: nn.AdamState | None) -> None:
    values = {name: var.value for name, var in params.items()}
    grads = {
        name: (var.grad if var.grad is not None else np.zeros_like(var.value)) / batch_size
        for name, var in params.items()
    }
    if optimizer == "adam":
        updated = nn.adam_step(values, grads, state, lr)
    elif optimizer == "sgd":
        updated = nn.sgd_step(values, grads, lr)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    for name, var in params.items():
        var.value = updated[name]


@dataclass
class Phase1Result:
    params: ExperientialParams
    predictor: TargetPredictor
    losses: list[LossRecord] = field(default_factory=list)


def train_phase1(dataset: list[Sample], config: TrainConfig, table: EmbeddingTable,
                 vocabulary: tuple[str, ...]) -> Phase1Result:
    """Train attention projections and predictor end to end."""
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng([config.seed, 1])
    dim = table.dim
    w_q = nn.Var(nn.glorot_uniform(rng, (config.d_k, dim), dim, config.d_k))
    w_k = nn.Var(nn.glorot_uniform(rng, (config.d_k, dim), dim, config.d_k))
    predictor = make_target_predictor(rng, len(vocabulary), hidden=config.predictor_hidden)

    e_objects = np.stack([embed(table, name)[0] for name in vocabulary])
    e_targets = {t: embed(table, t)[0] for t in {s.target for s in dataset}}
    size = dataset[0].observed.shape[0]
    label_dists = {id(s): _label_distribution(s, size, config.label_sigma) for s in dataset}

    trainable = {"experiential.w_q": w_q, "experiential.w_k": w_k}
    trainable.update(predictor.parameters())

    losses: list[LossRecord] = []
    shuffle_rng = np.random.default_rng([config.seed, 2])
    opt_state = nn.AdamState()
    global_step = 0
    for _ in range(config.epochs_phase1):
        order = shuffle_rng.permutation(len(dataset))
        for lo in range(0, len(dataset), config.batch_size):
            batch = [dataset[i] for i in order[lo:lo + config.batch_size]]
            _zero_grads(trainable)
            batch_loss = 0.0
            for sample in batch:
                scores = _experiential_score_var(
                    w_q, w_k, e_targets[sample.target], e_objects)
                loss = _prediction_loss(predictor, scores, sample, label_dists[id(sample)])
                nn.backward(loss)
                batch_loss += float(loss.value)
            if not math.isfinite(batch_loss):
                raise RuntimeError(f"non-finite loss at step {global_step}")
            _apply_step(trainable, config.lr_phase1, len(batch),
                        config.optimizer, opt_state)
            losses.append(LossRecord(global_step, 1, batch_loss / len(batch)))
            global_step += 1
    return Phase1Result(
        params=ExperientialParams(w_q=w_q.value.copy(), w_k=w_k.value.copy()),
        predictor=predictor,
        losses=losses,
    )


@dataclass
class Phase2Result:
    fusion: FusionNet
    losses: list[LossRecord] = field(default_factory=list)


def train_phase2(dataset: list[Sample], params: ExperientialParams,
                 predictor: TargetPredictor, gtable: GeneralizedTable,
                 config: TrainConfig, table: EmbeddingTable,
                 vocabulary: tuple[str, ...]) -> Phase2Result:
    """Train only the fusion network; everything else stays frozen."""
    if not dataset:
        raise ValueError("dataset is empty")
    size = dataset[0].observed.shape[0]
    rng = np.random.default_rng([config.seed, 3])
    fusion = make_fusion_net(rng, size, temporal_hidden=config.temporal_hidden,
                             head_hidden=config.head_hidden)

    targets = sorted({s.target for s in dataset})
    a_e = {}
    a_g = {}
    for t in targets:
        query = AffinityQuery(target=t, map_objects=vocabulary)
        a_e[t] = experiential_scores(params, table, query)
        a_g[t] = generalized_scores(gtable, query)
    label_dists = {id(s): _label_distribution(s, size, config.label_sigma) for s in dataset}

    trainable = fusion.parameters()
    losses: list[LossRecord] = []
    shuffle_rng = np.random.default_rng([config.seed, 4])
    opt_state = nn.AdamState()
    global_step = 0
    one = nn.Var(1.0)
    for _ in range(config.epochs_phase2):
        order = shuffle_rng.permutation(len(dataset))
        for lo in range(0, len(dataset), config.batch_size):
            batch = [dataset[i] for i in order[lo:lo + config.batch_size]]
            _zero_grads(trainable)
            batch_loss = 0.0
            for sample in batch:
                gamma = fusion.forward(sample.context())
                fused = nn.add(
                    nn.mul(gamma, nn.Var(a_g[sample.target])),
                    nn.mul(nn.sub(one, gamma), nn.Var(a_e[sample.target])),
                )
                loss = _prediction_loss(predictor, fused, sample, label_dists[id(sample)])
                nn.backward(loss)
                batch_loss += float(loss.value)
            if not math.isfinite(batch_loss):
                raise RuntimeError(f"non-finite loss at step {global_step}")
            _apply_step(trainable, config.lr_phase2, len(batch),
                        config.optimizer, opt_state)
            losses.append(LossRecord(global_step, 2, batch_loss / len(batch)))
            global_step += 1
    return Phase2Result(fusion=fusion, losses=losses)


def write_loss_csv(path, records: list[LossRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,phase,loss\n")
        for rec in records:
            fh.write(f"{rec.step},{rec.phase},{rec.loss!r}\n")
