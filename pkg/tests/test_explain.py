import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptmoe import explain as ex
from conceptmoe import pipeline as pl
from conceptmoe.errors import DomainError
from conceptmoe.moe import MoEModel
from conceptmoe.numerics import Tensor, no_grad
from conceptmoe.partition import PartitionModel, hard_partition
from conceptmoe.synthdata import SynthSpec, make_dataset


@pytest.fixture(scope="module")
def data():
    return make_dataset(SynthSpec(), 16)


@pytest.fixture(scope="module")
def models():
    rng = np.random.default_rng(0)
    part = PartitionModel(3, 8, rng)
    moe = MoEModel(3, 32, 8, rng)
    moe.gate.mlp.fc2.weight.data[...] = rng.normal(0, 1.0, size=moe.gate.mlp.fc2.weight.shape)
    return part, moe


# ---- importance -------------------------------------------------------------


def test_report_sums_to_one_and_ranks(data, models):
    report = ex.importance_table(*models, data, gamma=1.0)
    assert abs(report.mean_weights.sum() - 1.0) < 1e-6
    assert sorted(report.ranking.tolist()) == [0, 1, 2]
    assert np.all(np.diff(report.mean_weights[report.ranking]) <= 0)


def test_single_sample_report_is_its_weights(data, models):
    part, moe = models
    one = data.subset([0])
    report = ex.importance_table(part, moe, one)
    w = pl.predict(part, moe, one.images()).weights[0]
    assert np.array_equal(report.mean_weights, w)


def test_uniform_gate_gives_flat_table(data, models):
    part, _ = models
    moe = MoEModel(3, 32, 8, np.random.default_rng(1))
    report = ex.importance_table(part, moe, data)
    assert np.allclose(report.mean_weights, 1 / 3)


def test_empty_split_rejected(models):
    with pytest.raises(DomainError):
        ex.importance_table(*models, (np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=int)))
    with pytest.raises(DomainError):
        ex.report_from_weights(np.zeros((0, 3)))


def test_reference_table_ranking():
    # average weights of the reference facial-expression table, as a format check
    table = np.array([[0.2127, 0.1912, 0.1856, 0.1539, 0.1444, 0.1120]])
    report = ex.report_from_weights(table)
    assert report.ranking.tolist() == [0, 1, 2, 3, 4, 5]
    assert abs(table.sum() - 1.0) < 5e-4  # rounded to four places


def test_report_csv(data, models):
    text = ex.importance_table(*models, data).to_csv()
    lines = text.splitlines()
    assert lines[0] == "rank,concept,mean_weight" and len(lines) == 4


# ---- ablation ---------------------------------------------------------------


@pytest.mark.parametrize("mode", ["add", "remove"])
def test_ablation_anchor_points(data, models, mode):
    part, moe = models
    report = ex.importance_table(part, moe, data)
    curve = ex.ablation_curve(part, moe, data, report, mode)
    baseline = pl.accuracy(part, moe, data)
    parts = [n for n, _ in curve.points]
    assert parts == [0, 1, 2, 3]
    assert all(0.0 <= a <= 1.0 for _, a in curve.points)
    anchor = curve.points[0][1] if mode == "remove" else curve.points[-1][1]
    assert anchor == baseline


def test_ablation_all_removed_is_constant_prediction(data, models):
    part, moe = models
    report = ex.importance_table(part, moe, data)
    curve = ex.ablation_curve(part, moe, data, report, "remove")
    z = np.zeros((len(data), 3, 32))
    preds = pl.predict_features(moe, z).predicted
    assert len(set(preds.tolist())) == 1
    assert curve.points[-1][1] == np.mean(preds == data.labels())


def test_ablation_occlusion_mechanism(data, models):
    part, moe = models
    report = ex.importance_table(part, moe, data)
    curve = ex.ablation_curve(part, moe, data, report, "remove", ex.OCCLUDE_INPUT)
    assert curve.points[0][1] == pl.accuracy(part, moe, data)
    assert len(curve.points) == 4


def test_occlusion_needs_masks(data, models):
    part, moe = models
    report = ex.importance_table(part, moe, data)
    with pytest.raises(ex.MissingMasksError):
        ex.ablation_curve(part, moe, (data.images(), data.labels()), report, "remove", ex.OCCLUDE_INPUT)
    with pytest.raises(DomainError):
        ex.ablation_curve(part, moe, data, report, "sideways")


# ---- overlays ---------------------------------------------------------------


def test_overlay_matches_hard_partition(data, models):
    part, _ = models
    ov = ex.partition_overlay(part, data[0])
    with no_grad():
        grid = hard_partition(part(Tensor(data[0].image[None].astype(float))).occurrence)[0]
    assert np.array_equal(ov.concept_grid, np.kron(grid, np.ones((4, 4), dtype=grid.dtype)))
    # every pixel carries exactly its concept's palette colour
    assert np.array_equal(ov.pixels, ex.PALETTE[ov.concept_grid])
    assert ov.presence.shape == (3,)


def test_overlay_single_concept(data):
    part = PartitionModel(1, 8, np.random.default_rng(0))
    ov = ex.partition_overlay(part, data[0])
    assert np.all(ov.pixels == ex.PALETTE[0])


def test_overlay_ppm_round_trip(data, models, tmp_path):
    ov = ex.partition_overlay(models[0], data[1])
    ov.save(tmp_path / "o.ppm")
    raw = (tmp_path / "o.ppm").read_bytes()
    assert raw.startswith(b"P6\n32 32\n255\n")
    assert np.array_equal(ex.read_ppm(raw), ov.pixels)


def test_upsample_nearest():
    grid = np.array([[0, 1], [2, 3]])
    assert ex.upsample_nearest(grid, 4, 4).tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]


# ---- purity -------------------------------------------------------------------


def test_purity_perfect_partition():
    slots = np.random.default_rng(0).integers(0, 4, size=(10, 8, 8))
    purity, mapping = ex.purity_from_assignments(slots, slots, 4, 4)
    assert purity == 1.0 and mapping.tolist() == [0, 1, 2, 3]


def test_purity_uniform_random_near_quarter():
    rng = np.random.default_rng(1)
    slots = np.tile(ex.downsample_majority(np.kron(np.array([[0, 1], [2, 3]]), np.ones((16, 16), int))[None], 8, 8, 4), (500, 1, 1))
    concepts = rng.integers(0, 4, size=slots.shape)
    purity, _ = ex.purity_from_assignments(concepts, slots, 4, 4)
    assert abs(purity - 0.25) < 0.01


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_purity_invariant_to_concept_relabelling(seed):
    rng = np.random.default_rng(seed)
    slots = rng.integers(0, 4, size=(5, 8, 8))
    concepts = np.where(rng.uniform(size=slots.shape) < 0.7, slots, rng.integers(0, 5, size=slots.shape))
    perm = rng.permutation(5)
    a, _ = ex.purity_from_assignments(concepts, slots, 5, 4)
    b, _ = ex.purity_from_assignments(perm[concepts], slots, 5, 4)
    assert a == b


def test_downsample_majority():
    masks = np.kron(np.array([[0, 1], [2, 3]]), np.ones((16, 16), int))[None]
    small = ex.downsample_majority(masks, 8, 8, 4)
    assert small.shape == (1, 8, 8)
    assert small[0, 0, 0] == 0 and small[0, 7, 7] == 3


def test_model_purity_and_slot_ranking(data, models):
    purity, mapping = ex.partition_purity(models[0], data)
    assert 0.0 <= purity <= 1.0 and mapping.shape == (3,)
    with pytest.raises(ex.MissingMasksError):
        ex.partition_purity(models[0], (data.images(), data.labels()))
    report = ex.ImportanceReport(np.array([0.5, 0.3, 0.2]), np.array([0, 1, 2]))
    assert ex.slot_ranking(report, np.array([3, 0, 3]), 4).tolist() == [3, 0, 1, 2]
