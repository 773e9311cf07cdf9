import numpy as np
import pytest

from loat import nn
from loat.affinity import AffinityQuery, GeneralizedTable, generalized_scores
from loat.benchmark import desk_scene_config
from loat.embeddings import table_from_hash
from loat.gridworld import SceneConfig, generate_scene
from loat.policy import fusion_tensors, guidance_ratio, predictor_tensors
from loat.training import (
    TrainConfig,
    exhaustive_sample,
    make_dataset,
    train_phase1,
    train_phase2,
    write_loss_csv,
)

MINI_VOCAB = ("AnchorA", "AnchorB", "AnchorC", "AnchorD", "T1", "T2")
MINI_ROOMS = {"AnchorA": "kitchen", "AnchorB": "living",
              "AnchorC": "bedroom", "AnchorD": "bath"}


def mini_config(placement):
    return SceneConfig(
        vocabulary=MINI_VOCAB,
        anchor_rooms=dict(MINI_ROOMS),
        placement=placement,
        size=32,
        rooms=2,
        r_place=2,
        min_room_side=8,
    )


def mini_table():
    return table_from_hash(MINI_VOCAB, dim=16, seed=0)


def test_dataset_deterministic_and_labeled():
    config = mini_config({"T1": (("AnchorA", 1.0),)})
    a = make_dataset(config, ["T1"], n_scenes=3, seed=5, prefix_max=20)
    b = make_dataset(config, ["T1"], n_scenes=3, seed=5, prefix_max=20)
    assert len(a) == 3
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.map_grid, sb.map_grid)
        np.testing.assert_array_equal(sa.observed, sb.observed)
        np.testing.assert_array_equal(sa.temporal, sb.temporal)
        assert sa.label_cell == sb.label_cell
        scene = generate_scene(config, sa.scene_seed)
        assert sa.label_cell in scene.target_cells("T1")


def test_dataset_prefix_zero_is_initial_view():
    config = mini_config({"T1": (("AnchorA", 1.0),)})
    dataset = make_dataset(config, ["T1"], n_scenes=4, seed=1, prefix_max=0)
    for sample in dataset:
        # walk length zero: observation must fit inside one view disk
        rows = np.argwhere(sample.observed)
        spread = rows.max(axis=0) - rows.min(axis=0)
        assert spread.max() <= 2 * config.r_view
        # the map holds only what that single view saw
        assert sample.map_grid.sum() <= len(MINI_VOCAB)


def test_dataset_unplaceable_target():
    config = mini_config({"T1": (("AnchorA", 1.0),)})
    with pytest.raises(ValueError, match="T2"):
        make_dataset(config, ["T2"], n_scenes=1, seed=0)


def test_phase1_zero_learning_rate_keeps_parameters():
    config = mini_config({"T1": (("AnchorA", 1.0),)})
    # full-coverage samples guarantee nonzero attention gradients
    dataset = [exhaustive_sample(generate_scene(config, s), "T1") for s in range(2)]
    table = mini_table()
    base = TrainConfig(seed=3, d_k=8, lr_phase1=0.0, epochs_phase1=1, batch_size=2,
                       optimizer="sgd")
    trained = train_phase1(dataset, base, table, MINI_VOCAB)
    fresh = train_phase1(dataset, base, table, MINI_VOCAB)
    np.testing.assert_array_equal(trained.params.w_q, fresh.params.w_q)
    reference = train_phase1(
        dataset,
        TrainConfig(seed=3, d_k=8, lr_phase1=0.1, epochs_phase1=1, batch_size=2,
                    optimizer="sgd"),
        table, MINI_VOCAB)
    assert not np.array_equal(trained.params.w_q, reference.params.w_q)


def test_phase1_reproducible():
    config = mini_config({"T1": (("AnchorA", 1.0),)})
    dataset = make_dataset(config, ["T1"], n_scenes=3, seed=0, prefix_max=15)
    table = mini_table()
    tc = TrainConfig(seed=7, d_k=8, epochs_phase1=2, batch_size=4)
    a = train_phase1(dataset, tc, table, MINI_VOCAB)
    b = train_phase1(dataset, tc, table, MINI_VOCAB)
    np.testing.assert_array_equal(a.params.w_q, b.params.w_q)
    np.testing.assert_array_equal(a.params.w_k, b.params.w_k)
    for name, value in predictor_tensors(a.predictor).items():
        np.testing.assert_array_equal(value, predictor_tensors(b.predictor)[name])
    assert [r.loss for r in a.losses] == [r.loss for r in b.losses]


def test_phase1_single_scene_overfit():
    # exploration limit case: fully observed map, one target
    config = mini_config({"T1": (("AnchorA", 1.0),)})
    scene = generate_scene(config, 0)
    dataset = [exhaustive_sample(scene, "T1")]
    tc = TrainConfig(seed=0, d_k=8, lr_phase1=3e-3, epochs_phase1=200, batch_size=1)
    result = train_phase1(dataset, tc, mini_table(), MINI_VOCAB)
    assert len(result.losses) == 200
    assert result.losses[-1].loss < 0.1 * result.losses[0].loss


def test_phase2_freeze_contract_and_reproducibility():
    config = mini_config({"T1": (("AnchorA", 1.0),)})
    dataset = make_dataset(config, ["T1"], n_scenes=4, seed=0, prefix_max=25)
    table = mini_table()
    tc = TrainConfig(seed=0, d_k=8, epochs_phase1=2, epochs_phase2=2, batch_size=4)
    p1 = train_phase1(dataset, tc, table, MINI_VOCAB)
    gtable = GeneralizedTable(relevance={"T1": frozenset({"AnchorA"})})

    w_q_before = p1.params.w_q.tobytes()
    w_k_before = p1.params.w_k.tobytes()
    pred_before = {n: v.tobytes() for n, v in predictor_tensors(p1.predictor).items()}

    a = train_phase2(dataset, p1.params, p1.predictor, gtable, tc, table, MINI_VOCAB)

    assert p1.params.w_q.tobytes() == w_q_before
    assert p1.params.w_k.tobytes() == w_k_before
    for name, value in predictor_tensors(p1.predictor).items():
        assert value.tobytes() == pred_before[name], name

    b = train_phase2(dataset, p1.params, p1.predictor, gtable, tc, table, MINI_VOCAB)
    for name, value in fusion_tensors(a.fusion).items():
        np.testing.assert_array_equal(value, fusion_tensors(b.fusion)[name])


def _mean_gamma(fusion, dataset):
    return float(np.mean([guidance_ratio(fusion, s.context()) for s in dataset]))


def _sharp_params(table, target: str, anchor: str, weight: float = 6.0):
    """Rank-one projections whose attention points firmly at one anchor."""
    d_k = 4
    u = np.zeros(d_k)
    u[0] = 1.0
    w_q = np.outer(u, table.entries[target])
    w_k = weight * np.outer(u, table.entries[anchor])
    from loat.affinity import ExperientialParams

    return ExperientialParams(w_q=w_q, w_k=w_k)


def _pooling_predictor(channels: int, kernel: int = 5):
    """Hand-built predictor: each cell's logit is the local activation mass."""
    from loat.policy import TargetPredictor

    k1 = np.zeros((channels + 1, channels + 1, kernel, kernel))
    for c in range(channels):  # pass object channels through, drop the mask
        k1[c, c] = 1.0 / (kernel * kernel)
    k2 = np.full((1, channels + 1, kernel, kernel), 1.0 / (kernel * kernel))
    k2[0, channels] = 0.0
    pad = kernel // 2
    layers = [(nn.Var(k1), nn.Var(np.zeros(channels + 1)), 1, pad),
              (nn.Var(k2), nn.Var(np.zeros(1)), 1, pad)]
    return TargetPredictor(layers, input_gain=float(channels))


def test_phase2_gamma_directions():
    """The fusion net raises gamma when the generalized table explains the
    data better than the frozen experiential preferences, and lowers it
    when experience matches."""
    table = mini_table()
    tc = TrainConfig(seed=0, d_k=4, epochs_phase2=8, batch_size=8, lr_phase2=3e-2)
    params = _sharp_params(table, "T1", "AnchorA")  # experience says AnchorA
    predictor = _pooling_predictor(len(MINI_VOCAB))

    # adversarial: targets actually sit near AnchorB and the table knows it
    adversarial_config = mini_config({"T1": (("AnchorB", 0.95),)})
    adversarial_dataset = make_dataset(adversarial_config, ["T1"], n_scenes=32,
                                       seed=1, prefix_max=120)
    gtable_perfect = GeneralizedTable(relevance={"T1": frozenset({"AnchorB"})})
    adv = train_phase2(adversarial_dataset, params, predictor, gtable_perfect,
                       tc, table, MINI_VOCAB)
    adv_gamma = _mean_gamma(adv.fusion, adversarial_dataset)

    # familiar: placement matches the experiential preference exactly, while
    # the generalized table only offers diffuse guidance
    familiar_config = mini_config({"T1": (("AnchorA", 0.95),)})
    familiar_dataset = make_dataset(familiar_config, ["T1"], n_scenes=32,
                                    seed=2, prefix_max=120)
    gtable_broad = GeneralizedTable(
        relevance={"T1": frozenset({"AnchorA", "AnchorB", "AnchorC", "AnchorD"})})
    fam = train_phase2(familiar_dataset, params, predictor, gtable_broad,
                       tc, table, MINI_VOCAB)
    fam_gamma = _mean_gamma(fam.fusion, familiar_dataset)

    assert adv_gamma > 0.5, f"adversarial mean gamma {adv_gamma}"
    assert fam_gamma < 0.5, f"familiar mean gamma {fam_gamma}"


def test_loss_csv(tmp_path):
    from loat.training import LossRecord

    path = tmp_path / "loss.csv"
    write_loss_csv(path, [LossRecord(0, 1, 2.5), LossRecord(1, 2, 0.125)])
    assert path.read_text() == "step,phase,loss\n0,1,2.5\n1,2,0.125\n"
