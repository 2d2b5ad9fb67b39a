import itertools

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from pointseg.matching import (MatchConfig, PromptPair, assignment_total, bidirectional_match,
                               bipartite_match, cosine_similarity)
from pointseg.prompts import BoxBranchOutput, PointBranchOutput, PromptBackendSpec, box_branch, point_branch
from pointseg.scene import Box3D, ScenePointCloud


def brute_force_max(sim):
    g, b = sim.shape
    if g <= b:
        return max(sum(sim[r, c] for r, c in enumerate(p)) for p in itertools.permutations(range(b), g))
    return max(sum(sim[r, c] for c, r in enumerate(p)) for p in itertools.permutations(range(g), b))


def test_cosine_examples():
    assert cosine_similarity([1, 0, 0], [1, 0, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(0.70710678, abs=1e-8)
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 0])


def test_bipartite_examples():
    assert bipartite_match([[0.9, 0.1], [0.1, 0.9]]) == [(0, 0), (1, 1)]
    assert bipartite_match([[0.5, 0.5], [0.5, 0.5]]) == [(0, 0), (1, 1)]
    assert bipartite_match([[0.1, 0.9, 0.3]]) == [(0, 1)]
    assert bipartite_match([[0.1], [0.9], [0.3]]) == [(1, 0)]
    with pytest.raises(ValueError):
        bipartite_match(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        bipartite_match([[np.nan]])


def test_random_5x7_against_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(50):
        sim = rng.random((5, 7))
        pairs = bipartite_match(sim)
        assert len(pairs) == 5
        assert assignment_total(sim, pairs) == pytest.approx(brute_force_max(sim), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_assignment_is_one_to_one_and_optimal(g, b, seed):
    sim = np.random.default_rng(seed).uniform(-1, 1, (g, b))
    pairs = bipartite_match(sim)
    rows, cols = [r for r, _ in pairs], [c for _, c in pairs]
    assert len(pairs) == min(g, b)
    assert len(set(rows)) == len(rows) and len(set(cols)) == len(cols)
    assert assignment_total(sim, pairs) == pytest.approx(brute_force_max(sim), abs=1e-9)


# bidirectional matching on hand-made branches


def _blob_scene(centers, n=50, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.concatenate([c + rng.uniform(-0.2, 0.2, (n, 3)) for c in centers])
    groups = [np.arange(k * n, (k + 1) * n) for k in range(len(centers))]
    return ScenePointCloud(pts), groups


def _branches(cloud, groups, feats, boxes=None, box_feats=None):
    boxes = boxes if boxes is not None else [Box3D.from_points(cloud.positions[g]) for g in groups]
    box_feats = feats if box_feats is None else box_feats
    pb = PointBranchOutput(np.zeros((len(cloud), feats.shape[1])), groups, feats)
    return pb, BoxBranchOutput(boxes, box_feats)


def test_oracle_branches_give_ground_truth_pairs(small_scene, small_truth):
    spec = PromptBackendSpec("oracle", {"truth": small_truth})
    pb, bb = point_branch(small_scene.cloud, spec), box_branch(small_scene.cloud, spec)
    pairs = bidirectional_match(pb, bb, small_scene.cloud)
    assert len(pairs) == 3
    for k, p in enumerate(pairs):
        gt = np.nonzero(small_scene.gt.labels == k + 1)[0]
        assert np.array_equal(np.sort(p.points), gt)
        assert p.box.contains(small_scene.cloud.positions[gt]).mean() >= 0.99
        assert p.score == pytest.approx(1.0)


def test_spurious_orthogonal_box_is_dropped():
    cloud, groups = _blob_scene([[0, 0, 0], [3, 0, 0]])
    feats = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    boxes = [Box3D.from_points(cloud.positions[g]) for g in groups] + [Box3D([1.5, 0, 0], [0.5, 0.5, 0.5])]
    box_feats = np.vstack([feats, [[0, 0, 1.0]]])
    pb, bb = _branches(cloud, groups, feats, boxes, box_feats)
    for mode in ("bidirectional", "forward", "reverse"):
        pairs = bidirectional_match(pb, bb, cloud, MatchConfig(mode=mode))
        assert len(pairs) == 2
        assert all(not np.allclose(p.box.center, [1.5, 0, 0]) for p in pairs)


def test_displaced_points_are_excluded():
    cloud, groups = _blob_scene([[0, 0, 0], [3, 0, 0]])
    pos = cloud.positions.copy()
    box0 = Box3D.from_points(pos[groups[0]])
    displaced = groups[0][:10]  # 20% of 50
    pos[displaced] += [0, 0, 2.0]
    cloud = ScenePointCloud(pos)
    feats = np.eye(3)[:2]
    boxes = [box0, Box3D.from_points(pos[groups[1]])]
    pb, bb = _branches(cloud, groups, feats, boxes)
    pairs = bidirectional_match(pb, bb, cloud)
    expected = np.setdiff1d(groups[0], displaced)
    assert np.array_equal(np.sort(pairs[0].points), expected)
    assert np.array_equal(np.sort(pairs[1].points), groups[1])


def test_leftover_groups_become_point_led_pairs():
    cloud, groups = _blob_scene([[0, 0, 0], [3, 0, 0], [0, 3, 0]])
    feats = np.eye(3)
    pb, bb = _branches(cloud, groups, feats, [Box3D.from_points(cloud.positions[groups[1]])], feats[1:2])
    pairs = bidirectional_match(pb, bb, cloud)
    assert sorted(len(p.points) for p in pairs) == [50, 50, 50]
    for p in pairs:
        assert p.box.contains(cloud.positions[p.points]).all()


def test_none_mode_emits_independent_prompts():
    cloud, groups = _blob_scene([[0, 0, 0], [3, 0, 0]])
    pb, bb = _branches(cloud, groups, np.eye(2))
    pairs = bidirectional_match(pb, bb, cloud, MatchConfig(mode="none"))
    assert [p.cue for p in pairs] == ["point", "point", "box", "box"]
    assert pairs[0].box is None and pairs[2].box is not None
    with pytest.raises(ValueError):
        bidirectional_match(pb, bb, cloud, MatchConfig(mode="sideways"))


def test_pair_round_trip():
    p = PromptPair(np.array([3, 1]), Box3D([0, 0, 0], [1, 2, 3]), 4, 0.5)
    q = PromptPair.from_dict(p.to_dict())
    assert q.points.tolist() == [3, 1] and q.pair_id == 4 and q.score == 0.5
    assert np.array_equal(q.box.size, p.box.size)


@st.composite
def noisy_branches(draw):
    k = draw(st.integers(1, 5))
    nb = draw(st.integers(0, 6))
    seed = draw(st.integers(0, 2 ** 31 - 1))
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-5, 5, (k, 3))
    cloud, groups = _blob_scene(centers, n=20, seed=seed)
    pos = cloud.positions
    # groups leak a few points from elsewhere; boxes are jittered
    groups = [np.unique(np.concatenate([g, rng.choice(len(pos), 3)])) for g in groups]
    feats = rng.normal(size=(k, 6))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    boxes, bfeats = [], []
    for j in range(nb):
        src = groups[j % k]
        c = pos[src].mean(axis=0) + rng.normal(0, 0.1, 3)
        boxes.append(Box3D(c, rng.uniform(0.2, 0.6, 3)))
        f = feats[j % k] + rng.normal(0, 0.3, 6)
        bfeats.append(f / np.linalg.norm(f))
    bb = BoxBranchOutput(boxes, np.array(bfeats).reshape(nb, 6))
    pb = PointBranchOutput(np.zeros((len(pos), 6)), groups, feats)
    return cloud, pb, bb


@settings(max_examples=100, deadline=None)
@given(noisy_branches())
def test_pairs_lie_inside_their_boxes(data):
    cloud, pb, bb = data
    for p in bidirectional_match(pb, bb, cloud):
        assert len(p.points) > 0
        assert p.box.contains(cloud.positions[p.points], 1e-9).all()
        assert -1 <= p.score <= 1


@settings(max_examples=100, deadline=None)
@given(noisy_branches())
def test_matching_is_idempotent_on_its_output(data):
    cloud, pb, bb = data
    assume(len(bb.boxes) >= len(pb.point_groups))
    sim = pb.features @ bb.features.T
    forward = bipartite_match(sim)
    boxes_used = [b for _, b in forward]
    reverse = dict(bipartite_match(sim[:, boxes_used].T))
    # when forward and reverse disagree the emitted sets mix two groups
    assume(all(reverse[r] == g for r, (g, _) in enumerate(forward)))
    pairs = bidirectional_match(pb, bb, cloud, MatchConfig(s_min=-1))
    assume(len(pairs) == len(forward))
    pb2 = PointBranchOutput(pb.logits, [p.points for p in pairs], pb.features[[g for g, _ in forward]])
    bb2 = BoxBranchOutput([p.box for p in pairs], bb.features[boxes_used])
    again = bidirectional_match(pb2, bb2, cloud, MatchConfig(s_min=-1))
    assert len(again) == len(pairs)
    for a, b in zip(pairs, again):
        assert np.array_equal(np.sort(a.points), np.sort(b.points))


@settings(max_examples=100, deadline=None)
@given(noisy_branches())
def test_filtering_never_grows_sets(data):
    # every emitted point set is a subset of the single group it was filtered from
    cloud, pb, bb = data
    for mode in ("bidirectional", "forward", "reverse"):
        for p in bidirectional_match(pb, bb, cloud, MatchConfig(mode=mode, s_min=-1)):
            assert any(np.isin(p.points, g).all() and len(p.points) <= len(g) for g in pb.point_groups)
