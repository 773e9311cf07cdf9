"""Downstream navigation on affinity-activated maps.

The target predictor turns an activated semantic map into a per-cell
probability grid; episodes alternate prediction, waypoint selection among
cells the agent has not yet observed (or mapped target cells), and BFS
path following.  A small fusion network produces the guidance ratio that
blends generalized and experiential affinities at every replan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .affinity import (
    AffinityQuery,
    ExperientialParams,
    GeneralizedTable,
    experiential_scores,
    fuse,
    generalized_scores,
    loat_mul_scores,
)
from .embeddings import EmbeddingTable, embed
from .gridworld import (
    AgentState,
    Episode,
    FusionContext,
    Scene,
    bfs_distances,
    bfs_path,
    build_fusion_context,
    new_agent,
    observe,
    step,
)
from .maps import MetricMap, TopoGraph, activate_graph, activate_metric

MODES = ("loat_avg", "loat_mul", "experiential_only", "generalized_only", "uniform")


@dataclass
class TargetPredictor:
    """Spatial-resolution-preserving conv stack ending in one logit plane.

    The fixed input gain counteracts the small magnitude of activated map
    values (normalized scores times a sparse binary map); it is part of
    the architecture, not a trained parameter.
    """

    layers: list  # [(Var kernel, Var bias, stride, padding)] with stride 1, same padding
    input_gain: float = 1.0

    def forward(self, x: nn.Var) -> nn.Var:
        if self.input_gain != 1.0:
            x = nn.scale(x, self.input_gain)
        for i, (kernel, bias, stride, padding) in enumerate(self.layers):
            x = nn.conv2d(x, kernel, bias, stride=stride, padding=padding)
            if i + 1 < len(self.layers):
                x = nn.relu(x)
        return nn.reshape(x, x.value.shape[1:])  # (1, R, R) -> (R, R)

    def parameters(self, prefix: str = "predictor") -> dict[str, nn.Var]:
        out = {}
        for i, (kernel, bias, _, _) in enumerate(self.layers):
            out[f"{prefix}.{i}.kernel"] = kernel
            out[f"{prefix}.{i}.bias"] = bias
        return out

    @property
    def in_channels(self) -> int:
        return self.layers[0][0].value.shape[1]


def make_target_predictor(rng: np.random.Generator, map_channels: int,
                          hidden: int = 8, kernel: int = 5,
                          input_gain: float | None = None) -> TargetPredictor:
    """Predictor over the activated map plus one observed-mask channel."""
    in_ch = map_channels + 1
    pad = kernel // 2
    specs = [(in_ch, hidden, kernel, 1, pad), (hidden, 1, kernel, 1, pad)]
    layers = []
    for c_in, c_out, k, stride, padding in specs:
        fan_in, fan_out = c_in * k * k, c_out * k * k
        w = nn.Var(nn.glorot_uniform(rng, (c_out, c_in, k, k), fan_in, fan_out))
        b = nn.Var(np.zeros(c_out))
        layers.append((w, b, stride, padding))
    if input_gain is None:
        input_gain = float(map_channels)  # activated values are ~1/M
    return TargetPredictor(layers, input_gain=input_gain)


def predictor_input(activated_grid: np.ndarray, observed: np.ndarray) -> np.ndarray:
    return np.concatenate([activated_grid, observed[None].astype(np.float64)])


def _forward_logits_np(predictor: TargetPredictor, x: np.ndarray) -> np.ndarray:
    """Inference-only forward in float32 (episodes replan every few steps;
    the recorded float64 path is reserved for training and saliency)."""
    x = x.astype(np.float32) * np.float32(predictor.input_gain)
    last = len(predictor.layers) - 1
    for i, (kernel, bias, stride, padding) in enumerate(predictor.layers):
        k32 = kernel.value.astype(np.float32)
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
        kh, kw = k32.shape[2], k32.shape[3]
        view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        view = view[:, ::stride, ::stride]
        x = np.tensordot(k32, view, axes=([1, 2, 3], [0, 3, 4]))
        x += bias.value.astype(np.float32)[:, None, None]
        if i < last:
            np.maximum(x, 0.0, out=x)
    return x[0].astype(np.float64)


def predict_target(activated: MetricMap, observed: np.ndarray,
                   predictor: TargetPredictor) -> np.ndarray:
    """Probability over all cells: softmax of the predictor's logit plane."""
    logits = _forward_logits_np(predictor, predictor_input(activated.grid, observed))
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


@dataclass
class FusionNet:
    """Context encoders plus a logistic head producing the guidance ratio."""

    temporal_mlp: nn.Mlp
    env_encoder: nn.ConvEncoder
    head: nn.Mlp

    def forward(self, ctx: FusionContext) -> nn.Var:
        t = self.temporal_mlp.forward(nn.Var(ctx.temporal))
        e = self.env_encoder.forward(nn.Var(ctx.environmental))
        return nn.pick(self.head.forward(nn.concat([t, e])), 0)

    def parameters(self, prefix: str = "fusion") -> dict[str, nn.Var]:
        out = {}
        out.update(self.temporal_mlp.parameters(f"{prefix}.temporal"))
        out.update(self.env_encoder.parameters(f"{prefix}.env"))
        out.update(self.head.parameters(f"{prefix}.head"))
        return out


def make_fusion_net(rng: np.random.Generator, resolution: int,
                    temporal_dim: int = 10, temporal_hidden: int = 16,
                    head_hidden: int = 16) -> FusionNet:
    temporal_mlp = nn.make_mlp(rng, [temporal_dim, temporal_hidden, temporal_hidden],
                               ["relu", "relu"])
    specs = [(2, 4, 8, 4, 0), (4, 4, 5, 2, 0)]
    env_encoder = nn.make_conv_encoder(rng, specs)
    probe = np.zeros((2, resolution, resolution))
    env_out = nn.conv_forward(env_encoder, probe).size
    head = nn.make_mlp(rng, [temporal_hidden + env_out, head_hidden, 1],
                       ["relu", "logistic"])
    return FusionNet(temporal_mlp, env_encoder, head)


def guidance_ratio(net: FusionNet, ctx: FusionContext) -> float:
    """Scalar in (0, 1) blending generalized against experiential affinity."""
    return float(net.forward(ctx).value)


# ---------------------------------------------------------------------------
# Episode runner


@dataclass
class ParamBundle:
    """Read-only parameter set shared by all episode workers."""

    table: EmbeddingTable
    params: ExperientialParams
    gtable: GeneralizedTable
    predictor: TargetPredictor
    fusion: FusionNet | None = None
    embed_seed: int = 0


def mode_scores(mode: str, bundle: ParamBundle, query: AffinityQuery,
                ctx: FusionContext | None = None,
                fixed_gamma: float | None = None) -> tuple[np.ndarray, float | None]:
    """Affinity scores for one replan step under the given ablation mode."""
    m = len(query.map_objects)
    if mode == "uniform":
        return np.full(m, 1.0 / m), None
    if mode == "experiential_only":
        return experiential_scores(bundle.params, bundle.table, query, bundle.embed_seed), None
    if mode == "generalized_only":
        return generalized_scores(bundle.gtable, query), None
    if mode == "loat_mul":
        return loat_mul_scores(bundle.params, bundle.table, bundle.gtable,
                               query, bundle.embed_seed), None
    if mode == "loat_avg":
        a_e = experiential_scores(bundle.params, bundle.table, query, bundle.embed_seed)
        a_g = generalized_scores(bundle.gtable, query)
        if fixed_gamma is not None:
            gamma = float(fixed_gamma)
        else:
            if bundle.fusion is None:
                raise ValueError("loat_avg with dynamic gamma requires a fusion net")
            if ctx is None:
                raise ValueError("dynamic gamma requires a fusion context")
            gamma = guidance_ratio(bundle.fusion, ctx)
        return fuse(gamma, a_g, a_e), gamma
    raise ValueError(f"unknown mode {mode!r}")


def _chebyshev(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def success_distance(scene: Scene, start: tuple[int, int], target: str,
                     r_succ: int = 1) -> int | None:
    """Shortest path length to any free cell within r_succ of a target cell."""
    cells = scene.target_cells(target)
    if not cells:
        return None
    dist = bfs_distances(~scene.occupancy, start)
    best = None
    for tr, tc in cells:
        r0, r1 = max(0, tr - r_succ), min(scene.size, tr + r_succ + 1)
        c0, c1 = max(0, tc - r_succ), min(scene.size, tc + r_succ + 1)
        window = dist[r0:r1, c0:c1]
        reachable = window[window >= 0]
        if reachable.size:
            d = int(reachable.min())
            best = d if best is None else min(best, d)
    return best


def run_episode(scene: Scene, target: str, start: tuple[int, int],
                bundle: ParamBundle, mode: str, step_budget: int,
                fixed_gamma: float | None = None, k_replan: int = 5,
                r_succ: int = 1, false_negative_rate: float = 0.0,
                rng: np.random.Generator | None = None) -> Episode:
    """Prediction-guided navigation until stop, success, or budget.

    Waypoints are the argmax of the predicted distribution restricted to
    reachable cells not yet observed; once a target cell is in the agent's
    map the policy heads straight for it and stops within the success
    radius.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    vocabulary = scene.vocabulary
    target_channel = vocabulary.index(target) if target in vocabulary else None
    shortest = success_distance(scene, start, target, r_succ)
    shortest_len = 0 if shortest is None else shortest
    episode = Episode(
        scene_seed=scene.seed, target=target, start=tuple(start),
        trajectory=[tuple(start)], success=False, goal_found=False,
        shortest_path_len=shortest_len, mode=mode,
    )
    if step_budget <= 0:
        return episode

    agent = new_agent(scene, start)
    observe(scene, agent, false_negative_rate, rng)
    query = AffinityQuery(target=target, map_objects=vocabulary)
    waypoint: tuple[int, int] | None = None
    path: list[tuple[int, int]] = []
    since_replan = k_replan

    def mapped_target_cells() -> list[tuple[int, int]]:
        if target_channel is None:
            return []
        return [tuple(map(int, rc)) for rc in np.argwhere(agent.semantic_map.grid[target_channel] > 0)]

    while True:
        found = mapped_target_cells()
        if found:
            episode.goal_found = True
        near = [cell for cell in found if _chebyshev(agent.position, cell) <= r_succ]
        if near:
            # stop: success is judged against true target cells
            episode.success = any(
                _chebyshev(agent.position, cell) <= r_succ
                for cell in scene.target_cells(target)
            )
            break
        if agent.steps_taken >= step_budget:
            break

        need_replan = (
            waypoint is None
            or since_replan >= k_replan
            or agent.position == waypoint
            or (not found and agent.observed[waypoint])
            or not path
        )
        if need_replan:
            optimistic = ~(agent.observed & scene.occupancy)
            dist = bfs_distances(optimistic, agent.position)
            reachable = dist >= 0
            if found:
                waypoint = min(found, key=lambda cell: (
                    dist[cell] if dist[cell] >= 0 else np.iinfo(np.int32).max, cell))
            else:
                ctx = build_fusion_context(agent, scene, step_budget)
                scores, _ = mode_scores(mode, bundle, query, ctx, fixed_gamma)
                activated = activate_metric(agent.semantic_map, scores)
                prob = predict_target(activated, agent.observed, bundle.predictor)
                allowed = reachable & ~agent.observed
                if not allowed.any():
                    allowed = reachable
                masked = np.where(allowed, prob, -1.0)
                flat = int(np.argmax(masked))
                waypoint = (flat // scene.size, flat % scene.size)
            found_path = bfs_path(optimistic, agent.position, waypoint)
            path = found_path[1:] if found_path else []
            since_replan = 0
            if not path:  # nothing reachable: spin in place until budget
                path = [agent.position]

        nxt = path.pop(0)
        dr, dc = nxt[0] - agent.position[0], nxt[1] - agent.position[1]
        action = {(-1, 0): "up", (1, 0): "down", (0, -1): "left", (0, 1): "right",
                  (0, 0): "stop"}[(dr, dc)]
        if action == "stop":
            step(scene, agent, "stop", false_negative_rate, rng)
        else:
            before = agent.position
            step(scene, agent, action, false_negative_rate, rng)
            if agent.position == before:  # ran into a newly discovered wall
                path = []
        since_replan += 1
        episode.trajectory = agent.trajectory

    episode.trajectory = agent.trajectory
    if mapped_target_cells():
        episode.goal_found = True
    return episode


# ---------------------------------------------------------------------------
# Checkpoint (de)serialization


def predictor_tensors(predictor: TargetPredictor) -> dict[str, np.ndarray]:
    return {name: var.value for name, var in predictor.parameters().items()}


def predictor_arch(predictor: TargetPredictor) -> dict:
    return {
        "kind": "target_predictor",
        "input_gain": predictor.input_gain,
        "layers": [
            {"stride": stride, "padding": padding}
            for _, _, stride, padding in predictor.layers
        ],
    }


def predictor_from_tensors(arch: dict, tensors: dict[str, np.ndarray]) -> TargetPredictor:
    layers = []
    for i, meta in enumerate(arch["layers"]):
        kernel = nn.Var(tensors[f"predictor.{i}.kernel"])
        bias = nn.Var(tensors[f"predictor.{i}.bias"])
        layers.append((kernel, bias, meta["stride"], meta["padding"]))
    return TargetPredictor(layers, input_gain=arch["input_gain"])


def fusion_tensors(fusion: FusionNet) -> dict[str, np.ndarray]:
    return {name: var.value for name, var in fusion.parameters().items()}


def fusion_arch(fusion: FusionNet) -> dict:
    return {
        "kind": "fusion_net",
        "temporal_acts": [act for _, _, act in fusion.temporal_mlp.layers],
        "head_acts": [act for _, _, act in fusion.head.layers],
        "env_layers": [
            {"stride": stride, "padding": padding}
            for _, _, stride, padding in fusion.env_encoder.layers
        ],
    }


def fusion_from_tensors(arch: dict, tensors: dict[str, np.ndarray]) -> FusionNet:
    def mlp(prefix, acts):
        layers = []
        for i, act in enumerate(acts):
            layers.append((nn.Var(tensors[f"{prefix}.{i}.weight"]),
                           nn.Var(tensors[f"{prefix}.{i}.bias"]), act))
        return nn.Mlp(layers)

    env_layers = []
    for i, meta in enumerate(arch["env_layers"]):
        env_layers.append((nn.Var(tensors[f"fusion.env.{i}.kernel"]),
                           nn.Var(tensors[f"fusion.env.{i}.bias"]),
                           meta["stride"], meta["padding"]))
    return FusionNet(
        temporal_mlp=mlp("fusion.temporal", arch["temporal_acts"]),
        env_encoder=nn.ConvEncoder(env_layers),
        head=mlp("fusion.head", arch["head_acts"]),
    )


# ---------------------------------------------------------------------------
# Graph policy head


def node_priorities(graph: TopoGraph, per_object_scores,
                    target_embedding: np.ndarray) -> list[float]:
    """Dot product of each activated node embedding with the target embedding."""
    activations = activate_graph(graph, per_object_scores)
    return [float(np.dot(a, target_embedding)) for a in activations]


def run_graph_episode(graph: TopoGraph, per_object_scores,
                      target_embedding: np.ndarray, target_node: int,
                      budget: int) -> tuple[list[int], bool]:
    """Visit nodes in descending priority (ties to the lower index).

    Returns the visit order (truncated at budget) and whether the target
    node was reached.
    """
    priorities = node_priorities(graph, per_object_scores, target_embedding)
    order = sorted(range(len(graph.nodes)), key=lambda i: (-priorities[i], i))
    visits = order[:budget]
    return visits, target_node in visits
