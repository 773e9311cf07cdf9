"""Iteration harness: train both phases at reduced scale, run ablation rows,
print the directional comparison the acceptance suite will check."""

import argparse
import pickle
import time

import numpy as np

from loat.affinity import AffinityQuery, experiential_scores, generalized_scores
from loat.benchmark import (
    TRAIN_TARGETS,
    VOCABULARY,
    bundled_embedding_table,
    bundled_generalized_table,
    desk_scene_config,
    episode_specs,
    seen_split,
    shifted_split,
)
from loat.evaluation import ablation_suite, format_ablation_table
from loat.policy import ParamBundle, guidance_ratio
from loat.training import TrainConfig, make_dataset, train_phase1, train_phase2

parser = argparse.ArgumentParser()
parser.add_argument("--scenes", type=int, default=60)
parser.add_argument("--epochs1", type=int, default=3)
parser.add_argument("--epochs2", type=int, default=3)
parser.add_argument("--lr1", type=float, default=0.3)
parser.add_argument("--lr2", type=float, default=0.3)
parser.add_argument("--episodes", type=int, default=60)
parser.add_argument("--budget", type=int, default=150)
parser.add_argument("--prefix-max", type=int, default=60)
parser.add_argument("--jobs", type=int, default=2)
parser.add_argument("--save", type=str, default="")
parser.add_argument("--load", type=str, default="")
args = parser.parse_args()

table = bundled_embedding_table()
gtable = bundled_generalized_table()
config = desk_scene_config()

if args.load:
    with open(args.load, "rb") as fh:
        p1, p2 = pickle.load(fh)
    print("loaded checkpoints from", args.load)
else:
    tc = TrainConfig(seed=0, d_k=64, lr_phase1=args.lr1, lr_phase2=args.lr2,
                     epochs_phase1=args.epochs1, epochs_phase2=args.epochs2,
                     batch_size=8, n_train_scenes=args.scenes, prefix_max=args.prefix_max)
    t0 = time.time()
    dataset = make_dataset(config, TRAIN_TARGETS, tc.n_train_scenes, seed=tc.seed,
                           prefix_max=tc.prefix_max)
    print(f"dataset: {len(dataset)} samples in {time.time()-t0:.0f}s")
    t0 = time.time()
    p1 = train_phase1(dataset, tc, table, VOCABULARY)
    print(f"phase1: init {p1.losses[0].loss:.3f} final {p1.losses[-1].loss:.3f} "
          f"({time.time()-t0:.0f}s, {len(p1.losses)} steps)")
    t0 = time.time()
    p2 = train_phase2(dataset, p1.params, p1.predictor, gtable, tc, table, VOCABULARY)
    print(f"phase2: init {p2.losses[0].loss:.3f} final {p2.losses[-1].loss:.3f} "
          f"({time.time()-t0:.0f}s)")
    if args.save:
        with open(args.save, "wb") as fh:
            pickle.dump((p1, p2), fh)

bundle = ParamBundle(table=table, params=p1.params, gtable=gtable,
                     predictor=p1.predictor, fusion=p2.fusion)

# learned experiential scores per target
for t in TRAIN_TARGETS + ("Apple",):
    q = AffinityQuery(target=t, map_objects=VOCABULARY)
    a_e = experiential_scores(p1.params, table, q)
    top = sorted(zip(VOCABULARY, a_e), key=lambda kv: -kv[1])[:4]
    print(f"A_E {t:<7}", " ".join(f"{n}:{v:.2f}" for n, v in top))

# gamma on a few shifted-split contexts
split = shifted_split(gtable)
cfg_shift = desk_scene_config(placement=split.placement)
specs = episode_specs(split, 5, cfg_shift, scenes := {})
from loat.gridworld import new_agent, observe, build_fusion_context
gs = []
for spec in specs:
    sc = scenes[spec.scene_seed]
    ag = new_agent(sc, spec.start)
    observe(sc, ag)
    gs.append(guidance_ratio(p2.fusion, build_fusion_context(ag, sc, args.budget)))
print("initial-context gammas on shifted split:", [round(g, 3) for g in gs])

t0 = time.time()
results = ablation_suite(
    bundle,
    [seen_split(), split],
    {"seen": desk_scene_config(), "shifted": cfg_shift},
    n_episodes=args.episodes,
    step_budget=args.budget,
    jobs=args.jobs,
)
print(f"ablation ({args.episodes} eps/row, {time.time()-t0:.0f}s)")
print(format_ablation_table(results))
