"""Affinity-activated semantic maps for object-goal navigation.

The pipeline: text embeddings of category names feed a learned attention
that scores every map object against the target (experiential affinities);
an offline LLM relevance table supplies binary commonsense scores
(generalized affinities); a context-conditioned guidance ratio blends the
two; the blend activates metric-map channels or topological-graph nodes
before a convolutional predictor picks navigation waypoints.
"""

from .affinity import (
    AffinityQuery,
    ExperientialParams,
    GeneralizedTable,
    experiential_scores,
    fuse,
    generalized_scores,
    load_generalized_table,
    loat_mul_scores,
    save_generalized_table,
)
from .embeddings import EmbeddingTable, embed, hash_embed, load_table, save_table, table_from_hash
from .gridworld import (
    AgentState,
    Episode,
    FusionContext,
    Scene,
    SceneConfig,
    build_fusion_context,
    generate_scene,
    new_agent,
    observe,
    shortest_path,
    step,
)
from .maps import (
    MetricMap,
    TopoGraph,
    TopoNode,
    activate_graph,
    activate_metric,
    load_map_snapshot,
    save_map_snapshot,
)
from .policy import (
    FusionNet,
    ParamBundle,
    TargetPredictor,
    guidance_ratio,
    make_fusion_net,
    make_target_predictor,
    predict_target,
    run_episode,
)
from .training import Sample, TrainConfig, make_dataset, train_phase1, train_phase2
from .evaluation import (
    Metrics,
    ablation_suite,
    attention_heatmap,
    compute_metrics,
    ood_predict,
    ood_threshold,
)

__version__ = "0.1.0"
