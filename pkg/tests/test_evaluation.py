import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointseg.evaluation import (MAP_THRESHOLDS, average_precision, evaluate, instance_iou, iou_matrix,
                                 mean_results)
from pointseg.scene import InstanceLabeling3D

from oracles import staircase_ap


def test_iou_examples():
    assert instance_iou([1, 2, 3], [3, 2, 1]) == 1.0
    assert instance_iou([1, 2], [3, 4]) == 0.0
    assert instance_iou([1, 2, 3, 4], [3, 4, 5, 6]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        instance_iou([], [])
    # void points leave the prediction before the union is taken
    assert instance_iou([1, 2, 9], [1, 2], void=[9]) == 1.0


def test_ap_examples():
    gts = [[0, 1, 2], [3, 4, 5]]
    assert average_precision(gts, gts, 0.5) == 1.0
    assert average_precision([gts[0]], gts, 0.5) == 0.5
    assert average_precision([gts[0]], gts, 0.95) == 0.5
    assert average_precision([], gts, 0.5) == 0.0
    with pytest.raises(ValueError):
        average_precision(gts, [], 0.5)


def test_ap_counts_false_positives_by_rank():
    gts = [[0, 1], [2, 3]]
    # a confident miss ahead of two hits: precision 1/2 then 2/3 at full recall
    preds = [[8, 9], [0, 1], [2, 3]]
    assert average_precision(preds, gts, 0.5, scores=[0.9, 0.8, 0.7]) == pytest.approx(2 / 3)
    # a trailing miss does not change AP
    assert average_precision(preds, gts, 0.5, scores=[0.1, 0.8, 0.7]) == 1.0


def test_thresholds():
    assert MAP_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


def _gt_labels(sizes, background=10):
    labels = np.concatenate([np.full(s, k + 1) for k, s in enumerate(sizes)] + [np.zeros(background, int)])
    return InstanceLabeling3D(labels, len(sizes))


def test_evaluate_perfect_and_permuted():
    gt = _gt_labels([20, 30, 40])
    r = evaluate(gt, gt)
    assert (r.mAP, r.AP50, r.AP25) == (1.0, 1.0, 1.0)
    perm = np.array([0, 3, 1, 2])
    permuted = InstanceLabeling3D(perm[gt.labels], 3)
    assert evaluate(permuted, gt) == r
    assert evaluate(gt, permuted) == r


def test_erosion_to_sixty_percent():
    gt = _gt_labels([50, 100, 150])
    labels = gt.labels.copy()
    for k, size in enumerate([50, 100, 150]):
        idx = np.nonzero(gt.labels == k + 1)[0]
        labels[idx[int(0.6 * size):]] = 0
    r = evaluate(InstanceLabeling3D(labels, 3), gt)
    assert r.AP50 == 1.0 and r.AP25 == 1.0
    assert r.per_threshold["0.60"] == 1.0 and r.per_threshold["0.65"] == 0.0
    assert r.mAP == pytest.approx(0.3, abs=1e-15)


def test_evaluate_ignores_gt_unlabelled_points_on_prediction_side():
    gt = _gt_labels([10, 10], background=50)
    labels = gt.labels.copy()
    labels[gt.labels == 0] = 1  # prediction 1 also swallows the unannotated points
    r = evaluate(InstanceLabeling3D(labels, 2), gt)
    assert r.mAP == 1.0
    # a point of another GT instance does count against the prediction
    labels[np.nonzero(gt.labels == 2)[0][:5]] = 1
    iou = iou_matrix(InstanceLabeling3D(labels, 2), gt)
    assert iou[0, 0] == pytest.approx(10 / 15)


def test_evaluate_errors():
    gt = _gt_labels([5])
    with pytest.raises(ValueError):
        evaluate(InstanceLabeling3D(np.zeros(3, int), 0), gt)
    with pytest.raises(ValueError):
        evaluate(gt, InstanceLabeling3D(np.zeros(len(gt.labels), int), 0))


def test_result_serialisation():
    gt = _gt_labels([5, 5])
    r = mean_results([evaluate(gt, gt), evaluate(InstanceLabeling3D(np.zeros(20, int), 0), gt)], ["a", "b"])
    assert r.mAP == 0.5
    data = json.loads(r.to_json())
    assert data["per_scene"][1]["scene"] == "b" and set(data) >= {"mAP", "AP50", "AP25"}
    table = r.table().splitlines()
    assert table[0].split() == ["mAP", "AP50", "AP25"] and table[-1].startswith("mean")


@st.composite
def random_instances(draw):
    seed = draw(st.integers(0, 2 ** 31 - 1))
    rng = np.random.default_rng(seed)
    n = 30
    gts = [sorted(rng.choice(n, rng.integers(1, 10), replace=False).tolist()) for _ in range(rng.integers(1, 5))]
    preds = []
    for _ in range(rng.integers(0, 7)):
        if gts and rng.random() < 0.7:
            base = set(gts[rng.integers(len(gts))])
            base -= set(rng.choice(n, 2).tolist())
            base |= set(rng.choice(n, rng.integers(0, 3)).tolist())
            preds.append(sorted(base) or [int(rng.integers(n))])
        else:
            preds.append(sorted(set(rng.choice(n, rng.integers(1, 8)).tolist())))
    scores = rng.choice([0.2, 0.5, 0.9], len(preds)).tolist()  # ties exercise the size tie-break
    return preds, scores, gts


@settings(max_examples=300, deadline=None)
@given(random_instances(), st.sampled_from([0.25, 0.5, 0.75]))
def test_ap_matches_staircase_oracle(data, thresh):
    preds, scores, gts = data
    got = average_precision(preds, gts, thresh, scores=scores)
    assert got == pytest.approx(staircase_ap(preds, scores, gts, thresh), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(random_instances())
def test_ap_is_monotone_in_threshold(data):
    preds, scores, gts = data
    aps = [average_precision(preds, gts, t, scores=scores) for t in np.linspace(0.05, 1.0, 20)]
    assert all(b <= a + 1e-12 for a, b in zip(aps, aps[1:]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_evaluate_invariants(seed):
    rng = np.random.default_rng(seed)
    gt = InstanceLabeling3D.from_labels(rng.integers(0, 5, 60))
    if gt.num_instances == 0:
        return
    pred = InstanceLabeling3D.from_labels(np.where(rng.random(60) < 0.8, gt.labels, rng.integers(0, 5, 60)))
    r = evaluate(pred, gt)
    assert r.AP50 >= r.mAP - 1e-12
    k = pred.num_instances
    sizes = np.bincount(pred.labels, minlength=k + 1)[1:]
    if len(set(sizes.tolist())) < k:
        return  # equal sizes fall back to index order, which relabelling changes
    perm = np.concatenate([[0], rng.permutation(k) + 1])
    again = evaluate(InstanceLabeling3D(perm[pred.labels], k), gt)
    assert again.mAP == pytest.approx(r.mAP) and again.AP25 == pytest.approx(r.AP25)
