"""Command-line entry point wiring all modules into reproducible runs.

Subcommands: gen-scenes, train, eval, scores.  Every run writes a manifest
(config snapshot, seeds, input hashes, output paths) before any output
file; rerunning with the same flags reproduces every output byte for byte
(wall-clock timestamps exist only inside the manifest).  Exit codes:
0 success, 2 usage or config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, benchmark, nn
from .affinity import (
    AffinityQuery,
    ExperientialParams,
    GeneralizedTable,
    experiential_scores,
    fuse,
    generalized_scores,
    load_generalized_table,
    loat_mul_scores,
)
from .embeddings import EmbeddingTable, load_table
from .evaluation import (
    ABLATION_ROWS,
    ablation_suite,
    attention_heatmap,
    compute_metrics,
    format_ablation_table,
    ood_predict,
    run_episode_batch,
    write_episode_log,
    write_metrics_csv,
    write_pgm,
)
from .formats import canonical_dumps, file_content_hash, write_canonical_json
from .gridworld import SceneConfig, generate_scene
from .maps import MetricMap, activate_metric, save_map_snapshot
from .policy import (
    ParamBundle,
    fusion_arch,
    fusion_from_tensors,
    fusion_tensors,
    mode_scores,
    predictor_arch,
    predictor_from_tensors,
    predictor_tensors,
)
from .training import TrainConfig, exhaustive_sample, make_dataset, train_phase1, train_phase2, write_loss_csv


class ConfigError(Exception):
    pass


def _data_dir() -> Path | None:
    value = os.environ.get("LOAT_DATA_DIR")
    return Path(value) if value else None


def _load_tables(args) -> tuple[EmbeddingTable, GeneralizedTable]:
    data_dir = _data_dir()
    if args.embeddings:
        table = load_table(args.embeddings)
    elif data_dir and (data_dir / "embeddings.json").exists():
        table = load_table(data_dir / "embeddings.json")
    else:
        table = benchmark.bundled_embedding_table()
    if args.relevance:
        gtable = load_generalized_table(args.relevance)
    elif data_dir and (data_dir / "relevance.json").exists():
        gtable = load_generalized_table(data_dir / "relevance.json")
    else:
        gtable = benchmark.bundled_generalized_table()
    return table, gtable


def _scene_config_from_file(path) -> SceneConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        return SceneConfig(
            vocabulary=tuple(raw["vocabulary"]),
            anchor_rooms=dict(raw["anchor_rooms"]),
            placement={t: tuple((a, float(p)) for a, p in pairs)
                       for t, pairs in raw["placement"].items()},
            size=int(raw.get("size", 64)),
            rooms=int(raw.get("rooms", 4)),
            r_place=int(raw.get("r_place", 3)),
            r_view=int(raw.get("r_view", 5)),
            min_room_side=int(raw.get("min_room_side", 8)),
        )
    except KeyError as exc:
        raise ConfigError(f"scene config missing field {exc}") from exc


def _parse_seed_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi)))
    return [int(s) for s in text.split(",") if s]


def _write_manifest(out_dir: Path, command: str, args_dict: dict, seeds,
                    inputs: list, outputs: list) -> None:
    manifest = {
        "tool_version": __version__,
        "command": command,
        "config": {k: v for k, v in sorted(args_dict.items()) if not callable(v)},
        "seeds": list(seeds),
        "input_hashes": {str(p): file_content_hash(p) for p in inputs if Path(p).exists()},
        "outputs": [str(p) for p in outputs],
        "timestamp_unix": time.time(),  # only non-reproducible field, lives here only
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_dumps(manifest))


def cmd_gen_scenes(args) -> int:
    config = (_scene_config_from_file(args.config) if args.config
              else benchmark.desk_scene_config())
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(f"invalid scene config: {exc}") from exc
    seeds = _parse_seed_range(args.seeds)
    out_dir = Path(args.out)
    outputs = [out_dir / f"scene_{seed:06d}.loatmap" for seed in seeds]
    _write_manifest(out_dir, "gen-scenes", vars(args), seeds,
                    [args.config] if args.config else [], outputs)
    for seed, path in zip(seeds, outputs):
        scene = generate_scene(config, seed)
        planes = np.zeros((len(config.vocabulary) + 1, config.size, config.size))
        for cell, channel in scene.cell_to_channel.items():
            planes[channel][cell] = 1.0
        planes[-1] = scene.occupancy.astype(np.float64)
        snapshot = MetricMap(tuple(config.vocabulary) + ("__occupancy__",), planes)
        save_map_snapshot(path, snapshot)
    print(f"wrote {len(outputs)} scene files to {out_dir}")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    overrides = {}
    for name in ("seed", "d_k", "batch_size", "prefix_max"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if args.lr is not None:
        overrides["lr_phase1"] = args.lr
        overrides["lr_phase2"] = args.lr
    if args.epochs is not None:
        overrides["epochs_phase1"] = args.epochs
        overrides["epochs_phase2"] = max(1, args.epochs // 2)
    if args.scenes is not None:
        overrides["n_train_scenes"] = args.scenes
    if args.optimizer is not None:
        overrides["optimizer"] = args.optimizer
    if args.train_config:
        with open(args.train_config, "r", encoding="utf-8") as fh:
            overrides = {**json.load(fh), **overrides}
    try:
        return TrainConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from exc


def _save_phase1(out_dir: Path, params: ExperientialParams, predictor) -> None:
    tensors = {"experiential.w_q": params.w_q, "experiential.w_k": params.w_k}
    tensors.update(predictor_tensors(predictor))
    nn.save_checkpoint(out_dir / "phase1.json", tensors)
    write_canonical_json(out_dir / "phase1_arch.json", predictor_arch(predictor))


def _load_phase1(ckpt_dir: Path):
    tensors = nn.load_checkpoint(ckpt_dir / "phase1.json")
    with open(ckpt_dir / "phase1_arch.json", "r", encoding="utf-8") as fh:
        arch = json.load(fh)
    params = ExperientialParams(w_q=tensors["experiential.w_q"],
                                w_k=tensors["experiential.w_k"])
    return params, predictor_from_tensors(arch, tensors)


def _save_phase2(out_dir: Path, fusion) -> None:
    nn.save_checkpoint(out_dir / "phase2.json", fusion_tensors(fusion))
    write_canonical_json(out_dir / "phase2_arch.json", fusion_arch(fusion))


def _load_phase2(ckpt_dir: Path):
    tensors = nn.load_checkpoint(ckpt_dir / "phase2.json")
    with open(ckpt_dir / "phase2_arch.json", "r", encoding="utf-8") as fh:
        arch = json.load(fh)
    return fusion_from_tensors(arch, tensors)


def cmd_train(args) -> int:
    config = _train_config_from_args(args)
    table, gtable = _load_tables(args)
    out_dir = Path(args.out)
    scene_config = benchmark.desk_scene_config()
    scene_config.validate(table)
    phases = [1, 2] if args.phase == "all" else [int(args.phase)]
    if phases == [2] and not (out_dir / "phase1.json").exists():
        raise ConfigError(f"--phase 2 requires a phase-1 checkpoint in {out_dir}")
    outputs = []
    for phase in phases:
        outputs += [out_dir / f"phase{phase}.json", out_dir / f"phase{phase}_arch.json",
                    out_dir / f"loss_phase{phase}.csv"]
    _write_manifest(out_dir, "train", vars(args), [config.seed],
                    [args.embeddings or "", args.relevance or ""], outputs)

    dataset = make_dataset(scene_config, benchmark.TRAIN_TARGETS,
                           config.n_train_scenes, seed=config.seed,
                           prefix_max=config.prefix_max)
    if 1 in phases:
        result1 = train_phase1(dataset, config, table, scene_config.vocabulary)
        _save_phase1(out_dir, result1.params, result1.predictor)
        write_loss_csv(out_dir / "loss_phase1.csv", result1.losses)
        print(f"phase 1: {len(result1.losses)} steps, "
              f"loss {result1.losses[0].loss:.4f} -> {result1.losses[-1].loss:.4f}")
    if 2 in phases:
        params, predictor = _load_phase1(out_dir)
        result2 = train_phase2(dataset, params, predictor, gtable, config,
                               table, scene_config.vocabulary)
        _save_phase2(out_dir, result2.fusion)
        write_loss_csv(out_dir / "loss_phase2.csv", result2.losses)
        print(f"phase 2: {len(result2.losses)} steps, "
              f"loss {result2.losses[0].loss:.4f} -> {result2.losses[-1].loss:.4f}")
    return 0


def _bundle_from_checkpoints(args, table, gtable) -> ParamBundle:
    ckpt_dir = Path(args.checkpoints)
    if not (ckpt_dir / "phase1.json").exists():
        raise ConfigError(f"no phase-1 checkpoint in {ckpt_dir}")
    params, predictor = _load_phase1(ckpt_dir)
    fusion = None
    if (ckpt_dir / "phase2.json").exists():
        fusion = _load_phase2(ckpt_dir)
    return ParamBundle(table=table, params=params, gtable=gtable,
                       predictor=predictor, fusion=fusion)


def _splits_for(args, gtable):
    seen = benchmark.seen_split()
    shifted = benchmark.shifted_split(gtable)
    configs = {
        "seen": benchmark.desk_scene_config(),
        "shifted": benchmark.desk_scene_config(placement=shifted.placement),
    }
    if args.split == "seen":
        return [seen], configs
    if args.split == "shifted":
        return [shifted], configs
    return [seen, shifted], configs


def cmd_eval(args) -> int:
    table, gtable = _load_tables(args)
    bundle = _bundle_from_checkpoints(args, table, gtable)
    out_dir = Path(args.out)
    jobs = args.jobs if args.jobs else (os.cpu_count() or 1)

    if args.ablation:
        if bundle.fusion is None:
            raise ConfigError("ablation requires a phase-2 checkpoint")
        splits, configs = _splits_for(args, gtable)
        outputs = [out_dir / "ablation.csv", out_dir / "summary.json"]
        _write_manifest(out_dir, "eval-ablation", vars(args),
                        [s.scene_seed_base for s in splits], _ckpt_files(args), outputs)
        results = ablation_suite(bundle, splits, configs, args.episodes,
                                 step_budget=args.budget, jobs=jobs)
        write_metrics_csv(out_dir / "ablation.csv", results)
        _write_summary(out_dir, args, results)
        print(format_ablation_table(results))
        return 0

    if args.ood:
        targets = args.targets.split(",") if args.targets else list(benchmark.OOD_TARGETS)
        outputs = [out_dir / "ood.csv", out_dir / "summary.json"]
        _write_manifest(out_dir, "eval-ood", vars(args), [args.probe_seed],
                        _ckpt_files(args), outputs)
        probes = _ood_probes(args, gtable)
        rows = []
        for mode, gamma in (("loat_avg", None if bundle.fusion else 0.5),
                            ("experiential_only", None)):
            results = ood_predict(probes, targets, bundle,
                                  benchmark.VOCABULARY, mode, gamma)
            hit_rate = float(np.mean([r.hit for r in results]))
            rows.append((mode, hit_rate, results))
            print(f"{mode}: nearest-anchor hit rate {hit_rate:.3f} over {len(results)} probes")
        with open(out_dir / "ood.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("mode,scene_seed,target,nearest_anchor,distance,hit\n")
            for mode, _, results in rows:
                for r in results:
                    fh.write(f"{mode},{r.scene_seed},{r.target},"
                             f"{r.nearest_anchor or ''},{r.distance!r},{int(r.hit)}\n")
        _write_summary(out_dir, args, {m: h for m, h, _ in rows})
        return 0

    if args.heatmap:
        outputs = [out_dir / "summary.json"]
        _write_manifest(out_dir, "eval-heatmap", vars(args), [args.probe_seed],
                        _ckpt_files(args), outputs)
        _export_heatmaps(args, bundle, gtable, out_dir)
        _write_summary(out_dir, args, {"heatmaps": args.episodes})
        return 0

    splits, configs = _splits_for(args, gtable)
    outputs = []
    for split in splits:
        outputs += [out_dir / f"metrics_{split.name}.csv",
                    out_dir / f"episodes_{split.name}.jsonl"]
    outputs.append(out_dir / "summary.json")
    _write_manifest(out_dir, "eval", vars(args),
                    [s.scene_seed_base for s in splits], _ckpt_files(args), outputs)
    summary = {}
    for split in splits:
        scenes = {}
        specs = benchmark.episode_specs(split, args.episodes, configs[split.name], scenes)
        gamma = args.gamma if args.mode == "loat_avg" else None
        if args.mode == "loat_avg" and args.gamma is None and bundle.fusion is None:
            raise ConfigError("mode loat_avg needs --gamma or a phase-2 checkpoint")
        episodes = run_episode_batch(specs, scenes, bundle, args.mode, gamma,
                                     step_budget=args.budget, jobs=jobs)
        for ep in episodes:
            ep.mode = args.mode
        metrics = compute_metrics(episodes)
        write_metrics_csv(out_dir / f"metrics_{split.name}.csv",
                          {(args.mode, split.name): metrics})
        write_episode_log(out_dir / f"episodes_{split.name}.jsonl", episodes)
        summary[split.name] = {"sr": metrics.sr, "spl": metrics.spl, "gfr": metrics.gfr}
        print(f"{split.name}: SR {metrics.sr:.3f}  SPL {metrics.spl:.3f}  "
              f"GFR {metrics.gfr:.3f}  ({metrics.n_episodes} episodes)")
    _write_summary(out_dir, args, summary)
    return 0


def _ckpt_files(args) -> list:
    ckpt_dir = Path(args.checkpoints)
    return [p for p in (ckpt_dir / "phase1.json", ckpt_dir / "phase2.json") if p.exists()]


def _write_summary(out_dir: Path, args, payload) -> None:
    body = {
        "checkpoint_hashes": {str(p): file_content_hash(p) for p in _ckpt_files(args)},
        "results": _jsonable(payload),
    }
    write_canonical_json(out_dir / "summary.json", body)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {(",".join(k) if isinstance(k, tuple) else str(k)): _jsonable(v)
                for k, v in obj.items()}
    if hasattr(obj, "__dict__"):
        return {k: _jsonable(v) for k, v in vars(obj).items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _ood_probes(args, gtable):
    split = benchmark.shifted_split(gtable)
    config = benchmark.desk_scene_config(placement=split.placement)
    return make_dataset(config, [split.targets[0]], args.probes, seed=args.probe_seed,
                        prefix_max=args.budget,
                        scene_seed_base=benchmark.SHIFTED_SCENE_BASE)


def _export_heatmaps(args, bundle, gtable, out_dir: Path) -> None:
    split = benchmark.shifted_split(gtable)
    config = benchmark.desk_scene_config(placement=split.placement)
    for i in range(args.episodes):
        seed = benchmark.SHIFTED_SCENE_BASE + i
        scene = generate_scene(config, seed)
        target = split.targets[i % len(split.targets)]
        probe = exhaustive_sample(scene, target)
        query = AffinityQuery(target=target, map_objects=scene.vocabulary)
        scores, _ = mode_scores(
            "loat_avg", bundle, query, probe.context(),
            None if bundle.fusion is not None else 0.5)
        activated = activate_metric(
            MetricMap(scene.vocabulary, probe.map_grid.astype(np.float64)), scores)
        heat, saliency = attention_heatmap(bundle.predictor, activated, probe.observed)
        write_pgm(out_dir / f"heatmap_{seed}_{target}.pgm", heat)
        save_map_snapshot(out_dir / f"heatmap_{seed}_{target}.loatmap",
                          MetricMap(("saliency",), heat[None]))
        print(f"heatmap {seed} {target}: top channel "
              f"{scene.vocabulary[int(np.argmax(saliency))]}")


def cmd_scores(args) -> int:
    table, gtable = _load_tables(args)
    objects = tuple(args.objects.split(",")) if args.objects else benchmark.VOCABULARY
    query = AffinityQuery(target=args.target, map_objects=objects)
    if args.checkpoints and (Path(args.checkpoints) / "phase1.json").exists():
        params, _ = _load_phase1(Path(args.checkpoints))
    else:
        rng = np.random.default_rng(args.seed)
        params = ExperientialParams(
            w_q=nn.glorot_uniform(rng, (64, table.dim), table.dim, 64),
            w_k=nn.glorot_uniform(rng, (64, table.dim), table.dim, 64),
        )
    if args.target not in table:
        print(f"warning: target {args.target!r} not in embedding table; "
              f"using hash-embed fallback", file=sys.stderr)
    a_e = experiential_scores(params, table, query)
    a_g = generalized_scores(gtable, query)
    a_f = fuse(args.gamma, a_g, a_e)
    a_mul = loat_mul_scores(params, table, gtable, query)
    width = max(len(o) for o in objects)
    print(f"{'object':<{width}} {'A_E':>8} {'A_G':>8} {'A_F':>8} {'A_MUL':>8}")
    for i, name in enumerate(objects):
        print(f"{name:<{width}} {a_e[i]:8.4f} {a_g[i]:8.4f} {a_f[i]:8.4f} {a_mul[i]:8.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loat", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common_tables = argparse.ArgumentParser(add_help=False)
    common_tables.add_argument("--embeddings", help="embedding table JSON path")
    common_tables.add_argument("--relevance", help="generalized table JSON path")

    p_gen = sub.add_parser("gen-scenes", parents=[common_tables],
                           help="generate deterministic scene snapshot files")
    p_gen.add_argument("--config", help="scene config JSON")
    p_gen.add_argument("--seeds", required=True, help="range 'a..b' or comma list")
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(fn=cmd_gen_scenes)

    p_train = sub.add_parser("train", parents=[common_tables],
                             help="two-phase training on the desk benchmark")
    p_train.add_argument("--phase", choices=["1", "2", "all"], default="all")
    p_train.add_argument("--out", required=True, help="checkpoint directory")
    p_train.add_argument("--train-config", help="TrainConfig overrides JSON")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--scenes", type=int)
    p_train.add_argument("--d-k", dest="d_k", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--prefix-max", dest="prefix_max", type=int)
    p_train.add_argument("--optimizer", choices=["adam", "sgd"])
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", parents=[common_tables],
                            help="episode metrics, ablations, OOD, heatmaps")
    p_eval.add_argument("--checkpoints", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--mode", default="loat_avg")
    p_eval.add_argument("--gamma", type=float)
    p_eval.add_argument("--split", choices=["seen", "shifted", "both"], default="both")
    p_eval.add_argument("--episodes", type=int, default=200)
    p_eval.add_argument("--budget", type=int, default=benchmark.DEFAULT_STEP_BUDGET)
    p_eval.add_argument("--jobs", type=int, default=0, help="0 = all cores")
    p_eval.add_argument("--ablation", action="store_true")
    p_eval.add_argument("--ood", action="store_true")
    p_eval.add_argument("--heatmap", action="store_true")
    p_eval.add_argument("--targets", help="comma list for --ood")
    p_eval.add_argument("--probes", type=int, default=50, help="probe maps for --ood")
    p_eval.add_argument("--probe-seed", dest="probe_seed", type=int, default=123)
    p_eval.set_defaults(fn=cmd_eval)

    p_scores = sub.add_parser("scores", parents=[common_tables],
                              help="print affinity score families for a target")
    p_scores.add_argument("--target", required=True)
    p_scores.add_argument("--objects", help="comma list; default desk vocabulary")
    p_scores.add_argument("--gamma", type=float, default=0.5)
    p_scores.add_argument("--checkpoints")
    p_scores.add_argument("--seed", type=int, default=0)
    p_scores.set_defaults(fn=cmd_scores)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 3
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
