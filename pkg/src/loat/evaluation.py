"""Metrics, ablations, out-of-domain probes and gradient saliency.

SR is the success fraction, SPL weights success by shortest over actual
path length, and GFR counts episodes whose target cell ever entered the
agent's semantic map (the goal-found convention used throughout this
artifact).  The ablation suite replays identical episode seeds across
guidance-rate configurations so rows are directly comparable.
"""

from __future__ import annotations

import json
import math
import multiprocessing
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .affinity import AffinityQuery
from .benchmark import (
    DEFAULT_K_REPLAN,
    DEFAULT_R_SUCC,
    DEFAULT_STEP_BUDGET,
    SplitSpec,
    episode_specs,
)
from .gridworld import Episode, Scene, SceneConfig
from .maps import MetricMap, activate_metric
from .policy import ParamBundle, TargetPredictor, mode_scores, predict_target, predictor_input, run_episode
from .training import Sample


@dataclass(frozen=True)
class Metrics:
    sr: float
    spl: float
    gfr: float
    n_episodes: int
    per_target: dict[str, "Metrics"] = field(default_factory=dict)


def _episode_spl(episode: Episode) -> float:
    if not episode.success:
        return 0.0
    l = episode.shortest_path_len
    p = max(episode.path_len, 1)
    return l / max(p, l)


def compute_metrics(episodes: list[Episode]) -> Metrics:
    """Aggregate SR, SPL and GFR, with a per-target breakdown."""
    if not episodes:
        raise ValueError("no episodes to aggregate")
    by_target: dict[str, list[Episode]] = {}
    for ep in episodes:
        by_target.setdefault(ep.target, []).append(ep)
    per_target = {
        target: Metrics(
            sr=float(np.mean([e.success for e in eps])),
            spl=float(np.mean([_episode_spl(e) for e in eps])),
            gfr=float(np.mean([e.goal_found for e in eps])),
            n_episodes=len(eps),
        )
        for target, eps in sorted(by_target.items())
    }
    return Metrics(
        sr=float(np.mean([e.success for e in episodes])),
        spl=float(np.mean([_episode_spl(e) for e in episodes])),
        gfr=float(np.mean([e.goal_found for e in episodes])),
        n_episodes=len(episodes),
        per_target=per_target,
    )


# ---------------------------------------------------------------------------
# Episode execution (optionally parallel; results independent of job count)

_WORKER_CTX: dict = {}


def _run_one(args):
    index, scene_seed, target, start = args
    ctx = _WORKER_CTX
    scene = ctx["scenes"][scene_seed]
    episode = run_episode(
        scene, target, start, ctx["bundle"], ctx["mode"],
        step_budget=ctx["step_budget"], fixed_gamma=ctx["fixed_gamma"],
        k_replan=ctx["k_replan"], r_succ=ctx["r_succ"],
    )
    return index, episode


def run_episode_batch(specs, scenes: dict[int, Scene], bundle: ParamBundle,
                      mode: str, fixed_gamma: float | None = None,
                      step_budget: int = DEFAULT_STEP_BUDGET,
                      k_replan: int = DEFAULT_K_REPLAN,
                      r_succ: int = DEFAULT_R_SUCC, jobs: int = 1) -> list[Episode]:
    """Run the spec list; output order (and content) is independent of jobs."""
    global _WORKER_CTX
    _WORKER_CTX = {
        "scenes": scenes, "bundle": bundle, "mode": mode,
        "fixed_gamma": fixed_gamma, "step_budget": step_budget,
        "k_replan": k_replan, "r_succ": r_succ,
    }
    tasks = [(i, s.scene_seed, s.target, s.start) for i, s in enumerate(specs)]
    if jobs <= 1 or len(tasks) < 4:
        results = [_run_one(t) for t in tasks]
    else:
        with multiprocessing.get_context("fork").Pool(jobs) as pool:
            results = pool.map(_run_one, tasks, chunksize=max(1, len(tasks) // (jobs * 4)))
    results.sort(key=lambda pair: pair[0])
    return [ep for _, ep in results]


ABLATION_ROWS = (
    ("gamma=0", "loat_avg", 0.0),
    ("gamma=0.5", "loat_avg", 0.5),
    ("gamma=1", "loat_avg", 1.0),
    ("dynamic", "loat_avg", None),
    ("loat_mul", "loat_mul", None),
    ("uniform", "uniform", None),
)


def ablation_suite(bundle: ParamBundle, splits: list[SplitSpec],
                   scene_config_for: dict[str, SceneConfig], n_episodes: int,
                   step_budget: int = DEFAULT_STEP_BUDGET, jobs: int = 1,
                   rows=ABLATION_ROWS) -> dict[tuple[str, str], Metrics]:
    """Identical episode seeds replayed across every configuration row."""
    if bundle.fusion is None:
        raise ValueError("ablation requires a trained fusion net (dynamic row)")
    results: dict[tuple[str, str], Metrics] = {}
    for split in splits:
        scenes: dict[int, Scene] = {}
        specs = episode_specs(split, n_episodes, scene_config_for[split.name], scenes)
        for row_name, mode, fixed_gamma in rows:
            episodes = run_episode_batch(
                specs, scenes, bundle, mode, fixed_gamma,
                step_budget=step_budget, jobs=jobs)
            results[(row_name, split.name)] = compute_metrics(episodes)
    return results


def format_ablation_table(results: dict[tuple[str, str], Metrics]) -> str:
    lines = [f"{'config':<12} {'split':<8} {'SR':>7} {'SPL':>7} {'GFR':>7} {'n':>5}"]
    for (row_name, split_name), m in results.items():
        lines.append(
            f"{row_name:<12} {split_name:<8} {m.sr:7.3f} {m.spl:7.3f} {m.gfr:7.3f} {m.n_episodes:5d}"
        )
    return "\n".join(lines)


def write_metrics_csv(path, results: dict[tuple[str, str], Metrics]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("config,split,sr,spl,gfr,n_episodes\n")
        for (row_name, split_name), m in results.items():
            fh.write(f"{row_name},{split_name},{m.sr!r},{m.spl!r},{m.gfr!r},{m.n_episodes}\n")


def write_episode_log(path, episodes: list[Episode]) -> None:
    """JSON-lines episode log, one record per episode."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ep in episodes:
            record = {
                "scene_seed": ep.scene_seed,
                "target": ep.target,
                "mode": ep.mode,
                "success": ep.success,
                "goal_found": ep.goal_found,
                "path_len": ep.path_len,
                "shortest_len": ep.shortest_path_len,
                "steps": ep.steps,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Out-of-domain prediction probes


def ood_threshold(resolution: int) -> int:
    """Hit distance threshold: one-fifteenth of the map resolution, floored."""
    return resolution // 15


@dataclass(frozen=True)
class OodResult:
    scene_seed: int
    target: str
    nearest_anchor: str | None
    distance: float
    hit: bool


def ood_predict(probes: list[Sample], targets: list[str], bundle: ParamBundle,
                vocabulary: tuple[str, ...], mode: str = "loat_avg",
                fixed_gamma: float | None = None) -> list[OodResult]:
    """Predict locations for unseen targets over stored partial maps.

    The predicted cell is the argmax of the activated-map prediction; the
    hit flag requires the nearest stored object to be generally relevant to
    the target and within the resolution threshold.
    """
    channels = tuple(vocabulary)
    results = []
    for probe in probes:
        size = probe.observed.shape[0]
        threshold = ood_threshold(size)
        grid = probe.map_grid.astype(np.float64)
        semantic = MetricMap(channels, grid)
        for target in targets:
            query = AffinityQuery(target=target, map_objects=channels)
            scores, _ = mode_scores(mode, bundle, query, probe.context(), fixed_gamma)
            activated = activate_metric(semantic, scores)
            prob = predict_target(activated, probe.observed, bundle.predictor)
            flat = int(np.argmax(prob))
            cell = np.array([flat // size, flat % size])
            nearest, best_d = None, math.inf
            for ch_index, name in enumerate(channels):
                for rc in np.argwhere(grid[ch_index] > 0):
                    d = float(np.linalg.norm(rc - cell))
                    if d < best_d:
                        nearest, best_d = name, d
            related = bundle.gtable.related(target)
            hit = nearest is not None and nearest in related and best_d <= threshold
            results.append(OodResult(
                scene_seed=probe.scene_seed, target=target,
                nearest_anchor=nearest, distance=best_d, hit=hit,
            ))
    return results


# ---------------------------------------------------------------------------
# Gradient saliency


def attention_heatmap(predictor: TargetPredictor, activated: MetricMap,
                      observed: np.ndarray):
    """Input-gradient saliency of the predicted cell's log-probability.

    Returns (spatial heatmap in [0, 1], per-channel mean |gradient|).
    The heatmap is the channel-sum of absolute gradients, min-max
    normalized; an all-equal gradient yields a flat zero map with a
    warning.
    """
    x = nn.Var(predictor_input(activated.grid, observed))
    logits = nn.flatten(predictor.forward(x))
    log_probs = nn.log_softmax(logits)
    target_cell = int(np.argmax(logits.value))
    nn.backward(nn.pick(log_probs, target_cell))
    grad = np.abs(x.grad[:-1])  # drop the observed-mask channel
    per_channel = grad.mean(axis=(1, 2))
    spatial = grad.sum(axis=0)
    lo, hi = float(spatial.min()), float(spatial.max())
    if hi - lo <= 0.0:
        warnings.warn("degenerate saliency: all input gradients equal; flat heatmap")
        return np.zeros_like(spatial), per_channel
    return (spatial - lo) / (hi - lo), per_channel


def write_pgm(path, grid: np.ndarray) -> None:
    """8-bit binary portable graymap of a [0, 1] grid; deterministic bytes."""
    levels = np.clip(np.rint(np.asarray(grid, dtype=np.float64) * 255.0), 0, 255)
    data = levels.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
