import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import central_difference
from wsgrasp.errors import DomainError, FormatError, UsageError
from wsgrasp.geom3d import PointCloud, RigidTransform, random_rotation, sample_surface
from wsgrasp.pssn import (GRIP_DIM, OBJ_DIM, FusionNet, ObjectFeatureNet, Pssn, PssnDataset, StageNet,
                          bce_softmax, concat_features, eval_topk, object_features, random_scorer, select_contacts,
                          softmax, stage_labels, train_pssn)
from wsgrasp.primitives import make_primitive
from wsgrasp.quality import GroundTruthRecord


def box_cloud(M=96, seed=0):
    return sample_surface(make_primitive("box", (0.05, 0.04, 0.06)), M, seed=seed)


def grid_cloud(n=10):
    """Points 1 cm apart: with a 5 mm tolerance only the exact point is near."""
    g = np.stack(np.meshgrid(np.arange(n), np.arange(n), [0.0], indexing="ij"), -1).reshape(-1, 3) * 0.01
    return PointCloud(g)


def toy_records(n_rec=6, M=64, n_sets=6, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_rec):
        cloud = box_cloud(M, seed=i)
        sets = np.array([rng.choice(M, 3, replace=False) for _ in range(n_sets)])
        out.append(GroundTruthRecord(cloud, "g", sets))
    return out


FEATS = {"g": np.random.default_rng(9).normal(size=(1, GRIP_DIM))}


# ---------------------------------------------------------------- features

def test_object_features_shape_and_equivariance(rng):
    net = ObjectFeatureNet(seed=1)
    cloud = box_cloud(128)
    f = object_features(net, cloud)
    assert f.shape == (128, OBJ_DIM)
    p = rng.permutation(128)
    fp = object_features(net, PointCloud(cloud.points[p], cloud.normals[p]))
    assert np.allclose(fp, f[p], atol=1e-9)


def test_zero_weights_zero_features():
    net = ObjectFeatureNet()
    for n in net.nets.values():
        n.zero_()
    assert not np.any(net(box_cloud()))


def test_too_few_points():
    with pytest.raises(DomainError):
        ObjectFeatureNet()(PointCloud(np.random.default_rng(0).normal(size=(8, 3))))


@pytest.mark.parametrize("normalize", [True, False])
def test_rigid_motion_contract(normalize):
    net = ObjectFeatureNet(seed=2, normalize=normalize)
    cloud = box_cloud(128)
    rng = np.random.default_rng(3)
    T = RigidTransform(random_rotation(rng), rng.normal(scale=0.1, size=3))
    moved = PointCloud(T.apply(cloud.points), cloud.normals @ T.rotation.T)
    same = np.allclose(net(cloud), net(moved), atol=1e-9)
    assert same == normalize


def test_object_net_gradient(rng):
    net = ObjectFeatureNet(seed=4)
    cloud = box_cloud(32)
    y, tape = net.forward(cloud)
    w = rng.normal(size=y.shape)
    grads = net.backward(tape, w)
    loss = lambda: float(np.sum(net(cloud) * w))
    h = 1e-6
    for p, g in zip(net.params, grads):
        for _ in range(8):
            i = tuple(rng.integers(n) for n in p.shape)
            old = p[i]
            p[i] = old + h
            up = loss()
            p[i] = old - h
            down = loss()
            p[i] = old
            assert g[i] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-6)


def test_concat_layout_and_tiling(rng):
    g = rng.normal(size=(1, GRIP_DIM))
    o = rng.normal(size=(1, OBJ_DIM))
    assert np.array_equal(concat_features(g, o), np.hstack([o, g]))
    o = rng.normal(size=(7, OBJ_DIM))
    c = concat_features(g, o)
    assert c.shape == (7, OBJ_DIM + GRIP_DIM)
    assert np.array_equal(c[0, OBJ_DIM:], c[-1, OBJ_DIM:])
    with pytest.raises(DomainError):
        concat_features(np.zeros((1, 255)), o)


def test_zero_gripper_feature_path(rng):
    fusion = FusionNet(seed=0)
    o = rng.normal(size=(5, OBJ_DIM))
    a = fusion.forward(np.zeros(GRIP_DIM), o)[0]
    fusion.net.params[0][OBJ_DIM:] = rng.normal(size=(GRIP_DIM, OBJ_DIM))
    b = fusion.forward(np.zeros(GRIP_DIM), o)[0]
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- stage scoring

@given(st.integers(0, 2 ** 31), st.integers(1, 3))
def test_stage_probs_sum_to_one(seed, stage):
    rng = np.random.default_rng(seed)
    fused = rng.normal(size=(40, OBJ_DIM)) * 5
    pts = rng.normal(size=(40, 3))
    p = StageNet(stage, seed=seed % 100).probs(fused, pts, tuple(range(stage - 1)))
    assert abs(p.sum() - 1.0) < 1e-12 and np.all(p >= 0)


def test_stage_equivariance(rng):
    head = StageNet(2, seed=1)
    fused = rng.normal(size=(30, OBJ_DIM))
    pts = rng.normal(size=(30, 3))
    p = head.probs(fused, pts, (4,))
    perm = rng.permutation(30)
    inv = np.argsort(perm)
    pp = head.probs(fused[perm], pts[perm], (int(inv[4]),))
    assert np.allclose(pp, p[perm], atol=1e-15)


def test_bce_gradient(rng):
    z = rng.normal(size=20)
    y = (rng.random(20) < 0.3).astype(float)
    _, g = bce_softmax(z, y)
    fd = central_difference(lambda: bce_softmax(z, y)[0], z, 1e-6)
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-9)


def test_softmax_shift_invariant():
    z = np.array([1.0, 2.0, 3.0])
    assert np.allclose(softmax(z), softmax(z + 1000.0))


# ---------------------------------------------------------------- selection

def _delta(i, M):
    p = np.zeros(M)
    p[i] = 1.0
    return p


def test_delta_distributions_force_selection():
    cloud = box_cloud(50)
    probs = [lambda s, c: _delta(7, 50), lambda s, c: _delta(3, 50), lambda s, c: _delta(41, 50)]
    sets = select_contacts([], None, cloud, k=(5, 5, 5), stage_probs=probs)
    assert sets[0].indices == (7, 3, 41)
    assert sets[0].prob == 1.0


def test_uniform_falls_back_to_index_order():
    cloud = box_cloud(50)
    u = lambda s, c: np.full(50, 0.02)
    sets = select_contacts([], None, cloud, k=(4, 4, 4), stage_probs=[u, u, u])
    assert [s.indices for s in sets] == [(0, 1, 2), (0, 1, 3), (0, 1, 4), (0, 1, 5)]


def test_no_repeated_indices_and_beam(rng):
    model = Pssn(3, seed=0)
    cloud = box_cloud(64)
    fused = model.fused(cloud, FEATS["g"])
    sets = select_contacts(model.stages, fused, cloud, k=(8, 6, 5), beam=2)
    assert len(sets) == 2 * 2 * 5
    for s in sets:
        assert len(set(s.indices)) == 3
        assert np.array_equal(s.points, cloud.points[list(s.indices)])
    probs = [s.prob for s in sets]
    assert probs == sorted(probs, reverse=True)
    again = select_contacts(model.stages, fused, cloud, k=(8, 6, 5), beam=2)
    assert [s.indices for s in again] == [s.indices for s in sets]


def test_k_too_large():
    cloud = box_cloud(20)
    u = lambda s, c: np.full(20, 0.05)
    with pytest.raises(DomainError):
        select_contacts([], None, cloud, k=(21, 4, 4), stage_probs=[u, u, u])


def test_selection_equivariant_in_points(rng):
    model = Pssn(3, seed=1)
    cloud = box_cloud(64)
    perm = rng.permutation(64)
    moved = PointCloud(cloud.points[perm], cloud.normals[perm])
    a = select_contacts(model.stages, model.fused(cloud, FEATS["g"]), cloud, k=(4, 4, 4))[0]
    b = select_contacts(model.stages, model.fused(moved, FEATS["g"]), moved, k=(4, 4, 4))[0]
    assert np.allclose(a.points, b.points)


# ---------------------------------------------------------------- labels and evaluation

def test_stage_labels():
    cloud = grid_cloud()
    rec = GroundTruthRecord(cloud, "g", np.array([[0, 11, 22], [5, 11, 99]]))
    assert set(np.flatnonzero(stage_labels(rec, 1))) == {0, 5, 11, 22, 99}
    assert set(np.flatnonzero(stage_labels(rec, 2, (11,)))) == {0, 22, 5, 99}
    assert set(np.flatnonzero(stage_labels(rec, 3, (11, 0)))) == {22}
    assert not stage_labels(rec, 3, (0, 5)).any()


def test_perfect_and_adversarial_scorers():
    recs = [GroundTruthRecord(grid_cloud(), "g", np.array([[0, 11, 22], [5, 11, 99]]))] * 5
    ds = PssnDataset(recs)
    perfect = lambda rec, s, cond: stage_labels(rec, s, cond) + 1e-9
    assert eval_topk(None, ds, scorer=perfect) == [{"top1": 100.0, "top10": 100.0}] * 3
    valid = set(np.unique(recs[0].sets))
    far = np.array([0.0 if i in valid else 1.0 for i in range(100)])
    assert [r["top10"] for r in eval_topk(None, ds, scorer=lambda rec, s, c: far)] == [0.0, 0.0, 0.0]
    assert [r["top1"] for r in eval_topk(None, ds, scorer=lambda rec, s, c: far)] == [0.0, 0.0, 0.0]


def test_random_scorer_binomial():
    rng = np.random.default_rng(0)
    recs = []
    for _ in range(400):
        idx = rng.choice(100, 10, replace=False)   # 10% of the cloud is valid
        recs.append(GroundTruthRecord(grid_cloud(), "g", idx.reshape(5, 2)))
    top1 = eval_topk(None, PssnDataset(recs), scorer=random_scorer(1))[0]["top1"]
    sigma = 100 * math.sqrt(0.1 * 0.9 / 400)
    assert abs(top1 - 10.0) < 3 * sigma


# ---------------------------------------------------------------- training

def test_empty_dataset():
    with pytest.raises(UsageError):
        train_pssn(PssnDataset([]), FEATS)


def test_training_is_deterministic():
    ds = PssnDataset(toy_records())
    a = train_pssn(ds, FEATS, epochs=(2, 1, 1), seed=5)
    b = train_pssn(ds, FEATS, epochs=(2, 1, 1), seed=5)
    assert a.losses == b.losses
    for p, q in zip(a.model.nets()["stage3"].params, b.model.nets()["stage3"].params):
        assert np.array_equal(p, q)


def test_later_stages_leave_earlier_frozen():
    ds = PssnDataset(toy_records())
    model = train_pssn(ds, FEATS, epochs=(2, 0, 0), seed=1).model
    snap1 = [p.copy() for p in model.stage_params(1)]
    train_pssn(ds, FEATS, epochs=(0, 3, 0), seed=1, model=model)
    assert all(np.array_equal(p, q) for p, q in zip(model.stage_params(1), snap1))
    snap2 = [p.copy() for p in model.stage_params(2)]
    train_pssn(ds, FEATS, epochs=(0, 0, 3), seed=1, model=model)
    assert all(np.array_equal(p, q) for p, q in zip(model.stage_params(1), snap1))
    assert all(np.array_equal(p, q) for p, q in zip(model.stage_params(2), snap2))


def test_stage1_loss_decreases():
    ds = PssnDataset(toy_records(n_rec=4, n_sets=3))
    res = train_pssn(ds, FEATS, epochs=(30, 0, 0), seed=0, batch=4)
    assert res.losses[0][-1] < res.losses[0][0]


# ---------------------------------------------------------------- persistence

def test_model_round_trip(tmp_path):
    model = Pssn(3, seed=7)
    model.save(tmp_path / "p.tnn", {"gripper": "tri3"})
    back, meta = Pssn.load(tmp_path / "p.tnn")
    assert meta["gripper"] == "tri3"
    cloud = box_cloud()
    assert np.array_equal(back.fused(cloud, FEATS["g"]), model.fused(cloud, FEATS["g"]))


def test_dataset_round_trip(tmp_path):
    ds = PssnDataset(toy_records(n_rec=3))
    ds.save(tmp_path / "ds.jsonl")
    back = PssnDataset.load(tmp_path / "ds.jsonl")
    assert len(back) == 3
    for a, b in zip(ds.records, back.records):
        assert np.array_equal(a.sets, b.sets)
        assert np.allclose(a.cloud.points, b.cloud.points, atol=1e-12)
    train, test = ds.split(1 / 3, seed=0)
    assert len(train) == 2 and len(test) == 1


def test_dataset_bad_records(tmp_path):
    PssnDataset(toy_records(n_rec=1, M=64)).save(tmp_path / "ds.jsonl")
    text = (tmp_path / "ds.jsonl").read_text()
    (tmp_path / "bad.jsonl").write_text(text.replace('"sets": [[', '"sets": [[999, '))
    with pytest.raises(FormatError):
        PssnDataset.load(tmp_path / "bad.jsonl")
    (tmp_path / "nokey.jsonl").write_text('{"gripper": "g"}\n')
    with pytest.raises(FormatError):
        PssnDataset.load(tmp_path / "nokey.jsonl")


def test_large_scale_config_smoke():
    cloud = box_cloud(M=2048)
    model = Pssn(3, seed=0)
    fused = model.fused(cloud, FEATS["g"])
    sets = select_contacts(model.stages, fused, cloud, (1024, 512, 512))
    assert len(sets) == 512
    assert all(len(set(s.indices)) == 3 for s in sets)
    probs = [s.prob for s in sets]
    assert probs == sorted(probs, reverse=True)
