import csv
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import count_oracle, wilcoxon_oracle
from subregion_seg import training
from subregion_seg.attention import ModalityAttention
from subregion_seg.errors import InvalidInputError
from subregion_seg.evaluation import (
    REPORT_COLUMNS,
    AblationError,
    ablation_run,
    composite_masks,
    dice,
    evaluate_dataset,
    evaluate_predictions,
    holdout_split,
    iou,
    kfold_split,
    wilcoxon_signed_rank,
)
from subregion_seg.model import ModelConfig, build_model
from subregion_seg.phantom import PhantomSpec, generate_dataset
from subregion_seg.prompting import Variant
from subregion_seg.training import TrainConfig

SMALL = PhantomSpec(size=(10, 64, 64), tumor_center=(4.5, 31.5, 31.5), radii=(4, 2.5, 1.2))


# -- dice / iou -----------------------------------------------------------------------------


def test_identical_and_disjoint():
    a = np.zeros((4, 4, 4), bool)
    a[1:3, 1:3, 1:3] = True
    assert dice(a, a) == 1.0 and iou(a, a) == 1.0
    b = np.zeros_like(a)
    b[0, 0, 0] = True
    assert dice(a, b) == 0.0 and iou(a, b) == 0.0


def test_block_inside_block():
    gt = np.zeros((6, 6, 6), bool)
    gt[1:3, 1:3, 1:3] = True  # 8 voxels
    pred = np.zeros_like(gt)
    pred[1:3, 1:3, 1] = True  # 4 voxels inside
    assert count_oracle(pred, gt) == pytest.approx((2 * 4 / 12, 0.5))
    assert dice(pred, gt) == pytest.approx(0.666667, abs=1e-6)
    assert iou(pred, gt) == 0.5


def test_empty_empty_is_one():
    z = np.zeros((3, 3, 3), bool)
    assert dice(z, z) == 1.0 and iou(z, z) == 1.0


def test_shape_mismatch():
    with pytest.raises(InvalidInputError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(InvalidInputError):
        iou(np.zeros((2, 2, 2)), np.zeros((2, 3, 2)))


def test_metrics_match_voxel_tally():
    rng = np.random.default_rng(0)
    for _ in range(200):
        pa, pb = rng.uniform(0, 1, 2)
        pred = rng.random((8, 8, 8)) < pa
        gt = rng.random((8, 8, 8)) < pb
        d, j = count_oracle(pred, gt)
        assert dice(pred, gt) == d and iou(pred, gt) == j
        assert dice(pred, gt) == dice(gt, pred) and iou(pred, gt) == iou(gt, pred)
        assert abs(dice(pred, gt) - 2 * iou(pred, gt) / (1 + iou(pred, gt))) <= 1e-12


# -- composites -----------------------------------------------------------------------------


def test_composites_rule():
    c = composite_masks(np.full((2, 2, 2), 2, np.uint8))
    assert c["WT"].all() and not c["TC"].any() and not c["ET"].any()
    c = composite_masks(np.full((2, 2, 2), 4, np.uint8))
    assert c["WT"].all() and c["TC"].all() and c["ET"].all()
    with pytest.raises(InvalidInputError):
        composite_masks(np.full((2, 2), 3, np.uint8))


@settings(max_examples=100)
@given(st.lists(st.sampled_from([0, 1, 2, 4]), min_size=8, max_size=8))
def test_composite_inclusion(labels):
    c = composite_masks(np.array(labels, np.uint8).reshape(2, 2, 2))
    assert np.all(c["WT"][c["TC"]]) and np.all(c["TC"][c["ET"]])


# -- reports ---------------------------------------------------------------------------------


def _random_pairs(rng, n):
    return [
        (f"c{i}", rng.choice([0, 1, 2, 4], size=(4, 5, 5)).astype(np.uint8),
         rng.choice([0, 1, 2, 4], size=(4, 5, 5)).astype(np.uint8))
        for i in range(n)
    ]


def test_perfect_predictions():
    rng = np.random.default_rng(1)
    pairs = [(cid, gt, gt) for cid, _, gt in _random_pairs(rng, 4)]
    agg = evaluate_predictions(pairs).aggregate()
    assert set(agg) == {"NCR", "ED", "ET", "WT", "TC"}
    for region in agg.values():
        assert set(region) == {"dice", "iou"}
        for mean, std in region.values():
            assert mean == 1.0 and std == 0.0


def test_aggregate_permutation_invariant():
    pairs = _random_pairs(np.random.default_rng(2), 7)
    a = evaluate_predictions(pairs).aggregate()
    shuffled = list(pairs)
    random.Random(0).shuffle(shuffled)
    b = evaluate_predictions(shuffled).aggregate()
    for region in a:
        for metric in ("dice", "iou"):
            assert a[region][metric] == pytest.approx(b[region][metric], abs=1e-15)


def test_report_csv(tmp_path):
    report = evaluate_predictions(_random_pairs(np.random.default_rng(3), 3), variant="full", fold=2, seed=5)
    report.to_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert len(rows) == 3 * 5
    assert {r["fold"] for r in rows} == {"2"} and {r["seed"] for r in rows} == {"5"}
    assert all(0 <= float(r["dice"]) <= 1 and 0 <= float(r["iou"]) <= 1 for r in rows)


def test_evaluate_untrained_model_on_phantoms(tmp_path):
    cases = [(f"p{i}", c) for i, c in enumerate(generate_dataset(2, SMALL, seed=0))]
    model = build_model(ModelConfig.desk())
    report = evaluate_dataset(model, ModalityAttention(32), cases)
    assert report.n_cases == 2 and not report.failed
    for region in report.aggregate().values():
        for mean, std in region.values():
            assert 0 <= mean <= 1 and std >= 0
    assert len(report.attention_rows) == 2 * 10 * 3
    report.write_attention_csv(tmp_path / "a.csv")
    with open(tmp_path / "a.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["case", "slice", "sub_region", "alpha_T1", "alpha_T1c", "alpha_T2", "alpha_FLAIR"]


def test_failed_case_is_recorded_and_excluded():
    good = generate_dataset(1, SMALL, seed=0)[0]
    bad = generate_dataset(1, SMALL, seed=1)[0]
    bad.imgs = bad.imgs[..., :3]  # wrong modality count for the model
    model = build_model(ModelConfig.desk())
    report = evaluate_dataset(model, ModalityAttention(32), [("good", good), ("bad", bad)])
    assert [c.case_id for c in report.cases] == ["good"]
    assert report.failed[0][0] == "bad"


def test_parallel_evaluation_matches_serial():
    cases = [(f"p{i}", c) for i, c in enumerate(generate_dataset(3, SMALL, seed=0))]
    model = build_model(ModelConfig.desk())
    a = evaluate_dataset(model, ModalityAttention(32), cases, jobs=1)
    b = evaluate_dataset(model, ModalityAttention(32), cases, jobs=3)
    assert a.rows() == b.rows()


def test_evaluate_requires_cases():
    with pytest.raises(InvalidInputError):
        evaluate_dataset(build_model(ModelConfig.desk()), ModalityAttention(32), [])


# -- splits ----------------------------------------------------------------------------------


def test_kfold_ten_by_five():
    split = kfold_split([f"c{i}" for i in range(10)], 5, seed=0)
    assert [len(f) for f in split.folds] == [2] * 5


def test_kfold_369():
    n, k = 369, 5
    # ceiling/floor arithmetic: n % k folds of ceil(n/k), the rest floor(n/k)
    expected = sorted([-(-n // k)] * (n % k) + [n // k] * (k - n % k))
    assert expected == [73, 74, 74, 74, 74]
    split = kfold_split(range(n), k, seed=0)
    assert sorted(len(f) for f in split.folds) == expected


def test_kfold_seeded():
    ids = [f"c{i}" for i in range(30)]
    assert kfold_split(ids, 5, 1) == kfold_split(ids, 5, 1)
    assert kfold_split(ids, 5, 1) != kfold_split(ids, 5, 2)
    with pytest.raises(InvalidInputError):
        kfold_split(ids[:3], 4)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_kfold_disjoint_cover(data):
    n = data.draw(st.integers(1, 1000))
    k = data.draw(st.integers(1, n))
    seed = data.draw(st.integers(0, 2**31))
    split = kfold_split(range(n), k, seed)
    flat = [c for f in split.folds for c in f]
    assert sorted(flat) == list(range(n))
    sizes = [len(f) for f in split.folds]
    assert max(sizes) - min(sizes) <= 1 and len(sizes) == k
    assert split == kfold_split(range(n), k, seed)


def test_holdout_split():
    split = holdout_split([f"c{i}" for i in range(25)], 0.8, seed=0)
    train, val = split.train_val(0)
    assert len(train) == 20 and len(val) == 5 and not set(train) & set(val)


# -- Wilcoxon -------------------------------------------------------------------------------


def test_wilcoxon_identical():
    assert wilcoxon_signed_rank([0.5, 0.7, 0.9], [0.5, 0.7, 0.9]) == 1.0


def test_wilcoxon_all_positive_six():
    a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    b = [0.0] * 6
    assert wilcoxon_oracle(a, b) == 2 / 2**6
    assert wilcoxon_signed_rank(a, b) == pytest.approx(0.03125, abs=1e-15)


def test_wilcoxon_symmetric():
    rng = np.random.default_rng(0)
    a, b = rng.random(12), rng.random(12)
    assert wilcoxon_signed_rank(a, b) == wilcoxon_signed_rank(b, a)


def test_wilcoxon_length_mismatch():
    with pytest.raises(InvalidInputError):
        wilcoxon_signed_rank([1, 2], [1, 2, 3])


def test_wilcoxon_exact_matches_enumeration():
    rng = np.random.default_rng(1)
    for n in range(1, 11):
        for _ in range(15):
            a = rng.integers(0, 6, n).tolist()
            b = rng.integers(0, 6, n).tolist()
            assert wilcoxon_signed_rank(a, b) == pytest.approx(wilcoxon_oracle(a, b), abs=1e-12)


def test_wilcoxon_exact_matches_scipy_without_ties():
    rng = np.random.default_rng(2)
    for n in (5, 9, 14, 20, 25):
        a, b = rng.random(n), rng.random(n)
        ref = stats.wilcoxon(a, b, method="exact").pvalue
        assert wilcoxon_signed_rank(a, b) == pytest.approx(ref, rel=1e-10)


def test_wilcoxon_normal_branch_matches_scipy():
    rng = np.random.default_rng(3)
    a = np.round(rng.random(60), 2)
    b = np.round(rng.random(60), 2)
    ref = stats.wilcoxon(a, b, zero_method="wilcox", correction=True, method="approx").pvalue
    assert wilcoxon_signed_rank(a, b) == pytest.approx(ref, rel=1e-9)


# -- ablation --------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_ablation():
    data = [(f"p{i}", c) for i, c in enumerate(generate_dataset(5, SMALL, seed=0))]
    return ablation_run(data, TrainConfig(epochs=1, seed=0))


def test_ablation_table_shape(tiny_ablation):
    table = tiny_ablation.table()
    assert [row["variant"] for row in table] == ["baseline", "+attention", "+prompting", "full"]
    for row in table:
        assert [k for k in row if k != "variant"] == ["NCR", "ED", "ET", "WT"]
        for mean, std in (row[k] for k in ("NCR", "ED", "ET", "WT")):
            assert 0 <= mean <= 1 and std >= 0


def test_ablation_shares_split(tiny_ablation):
    assert len(set(tiny_ablation.split_digest.values())) == 1
    ids = {tuple(c.case_id for c in r.cases) for r in tiny_ablation.reports.values()}
    assert len(ids) == 1


def test_ablation_failure_keeps_partial(monkeypatch):
    data = [(f"p{i}", c) for i, c in enumerate(generate_dataset(3, SMALL, seed=0))]
    real = training.train_new
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise RuntimeError("boom")
        return real(*args, **kwargs)

    monkeypatch.setattr(training, "train_new", flaky)
    with pytest.raises(AblationError) as info:
        ablation_run(data, TrainConfig(epochs=1), variants=[Variant(False, False), Variant(True, False)])
    assert list(info.value.partial.reports) == ["baseline"]
    assert "+attention" in str(info.value)
