"""Staged point-set selection over object point clouds.

Per-point object features (k-NN grouped PointNet), fused with a tiled gripper
feature, feed one scoring head per contact. Each head ranks every cloud point
with a softmax over points; heads after the first are conditioned on the
features and positions of the contacts already chosen.
"""
from __future__ import annotations

import itertools
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, FormatError, NumericError, UsageError
from .geom3d import PointCloud, load_cloud_csv, save_cloud_csv
from .nn import Adam, Linear, ReLU, Sequential, load_checkpoint, mlp, save_checkpoint
from .quality import GroundTruthRecord

log = logging.getLogger(__name__)

__all__ = [
    "ObjectFeatureNet",
    "FusionNet",
    "StageNet",
    "Pssn",
    "ContactPointSet",
    "PssnDataset",
    "object_features",
    "concat_features",
    "select_contacts",
    "train_pssn",
    "eval_topk",
    "stage_labels",
    "random_scorer",
]

OBJ_DIM = 64
GRIP_DIM = 256
GROUP = 16


# ---------------------------------------------------------------- features

def canonical_frame(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Centroid, principal-axis rotation (rows = axes) and max radius.

    Axis signs follow the third moment along each axis; the third axis is the
    cross product of the first two.
    """
    c = points.mean(axis=0)
    x = points - c
    r = float(np.max(np.linalg.norm(x, axis=1))) or 1.0
    _, vecs = np.linalg.eigh(x.T @ x)
    axes = vecs[:, ::-1].T.copy()
    for i in range(2):
        if np.sum((x @ axes[i]) ** 3) < 0:
            axes[i] = -axes[i]
    axes[2] = np.cross(axes[0], axes[1])
    return c, axes, r


class ObjectFeatureNet:
    """Single-scale grouped PointNet producing M x 64 per-point features."""

    def __init__(self, seed: int = 0, group: int = GROUP, normalize: bool = True):
        rng = np.random.default_rng(seed)
        self.group = group
        self.normalize = normalize
        self.local = mlp((6, 32, 64), rng, "conv1d-k1", final_activation="relu")
        self.point = mlp((70, 64), rng, "conv1d-k1", final_activation="relu")
        self.out = mlp((128, OBJ_DIM), rng, "conv1d-k1", final_activation="relu")

    @property
    def nets(self) -> dict[str, Sequential]:
        return {"obj.local": self.local, "obj.point": self.point, "obj.out": self.out}

    @property
    def params(self) -> list[np.ndarray]:
        return [p for n in self.nets.values() for p in n.params]

    def inputs(self, cloud: PointCloud) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Normalized positions, normals and neighbor indices."""
        M = len(cloud)
        if M < self.group:
            raise DomainError(f"cloud has {M} points, fewer than the group size {self.group}")
        pts = cloud.points
        nrm = cloud.normals if cloud.normals is not None else np.zeros_like(pts)
        if self.normalize:
            c, axes, r = canonical_frame(pts)
            pts = (pts - c) @ axes.T / r
            nrm = nrm @ axes.T
        _, nbr = cKDTree(pts).query(pts, k=self.group)
        return pts, nrm, nbr

    def forward(self, cloud: PointCloud):
        pts, nrm, nbr = self.inputs(cloud)
        M, k = nbr.shape
        grouped = np.concatenate([pts[nbr] - pts[:, None, :], nrm[nbr]], axis=2).reshape(M * k, 6)
        loc, t_loc = self.local.forward(grouped)
        loc = loc.reshape(M, k, -1)
        arg = np.argmax(loc, axis=1)
        pooled = np.take_along_axis(loc, arg[:, None, :], axis=1)[:, 0, :]
        h, t_pt = self.point.forward(np.hstack([pooled, pts, nrm]))
        g_arg = np.argmax(h, axis=0)
        glob = h[g_arg, np.arange(h.shape[1])]
        y, t_out = self.out.forward(np.hstack([h, np.tile(glob, (M, 1))]))
        return y, (M, k, arg, g_arg, t_loc, t_pt, t_out)

    def __call__(self, cloud: PointCloud) -> np.ndarray:
        return self.forward(cloud)[0]

    def backward(self, tape, gy) -> list[np.ndarray]:
        M, k, arg, g_arg, t_loc, t_pt, t_out = tape
        g_in, g_out = self.out.backward(t_out, gy)
        g_h = g_in[:, :OBJ_DIM].copy()
        g_glob = g_in[:, OBJ_DIM:].sum(axis=0)
        g_h[g_arg, np.arange(OBJ_DIM)] += g_glob
        g_pt_in, g_pt = self.point.backward(t_pt, g_h)
        g_pool = g_pt_in[:, :64]
        g_loc = np.zeros((M, k, 64))
        np.put_along_axis(g_loc, arg[:, None, :], g_pool[:, None, :], axis=1)
        _, g_local = self.local.backward(t_loc, g_loc.reshape(M * k, 64))
        return g_local + g_pt + g_out


def object_features(net: ObjectFeatureNet, cloud: PointCloud) -> np.ndarray:
    return net(cloud)


class FusionNet:
    """Tiles the gripper feature over points and compresses to M x 64."""

    def __init__(self, seed: int = 0):
        self.net = mlp((OBJ_DIM + GRIP_DIM, OBJ_DIM), np.random.default_rng(seed), "conv1d-k1",
                       final_activation="relu")

    def forward(self, grip: np.ndarray, obj: np.ndarray):
        return self.net.forward(concat_features(grip, obj))

    def backward(self, tape, gy):
        g_in, grads = self.net.backward(tape, gy)
        return g_in[:, :OBJ_DIM], grads


def concat_features(gripper_feat: np.ndarray, obj_feat: np.ndarray) -> np.ndarray:
    """[obj | gripper] per row, the gripper feature repeated for every point."""
    g = np.asarray(gripper_feat, dtype=float).reshape(1, -1)
    o = np.asarray(obj_feat, dtype=float)
    if g.shape[1] != GRIP_DIM or o.ndim != 2 or o.shape[1] != OBJ_DIM:
        raise DomainError(f"expected 1x{GRIP_DIM} gripper and Mx{OBJ_DIM} object features")
    return np.hstack([o, np.repeat(g, len(o), axis=0)])


class StageNet:
    """Pointwise scorer with a softmax over points.

    Stage s sees [fused_i | fused_c1 .. fused_c(s-1) | p_i - p_c1 .. p_i - p_c(s-1)].
    """

    def __init__(self, stage: int, seed: int = 0, hidden: int = 64):
        self.stage = stage
        self.width = OBJ_DIM * stage + 3 * (stage - 1)
        self.net = mlp((self.width, hidden, hidden, 1), np.random.default_rng(seed), "conv1d-k1")

    def inputs(self, fused: np.ndarray, pts: np.ndarray, cond: tuple[int, ...]) -> np.ndarray:
        if len(cond) != self.stage - 1:
            raise DomainError(f"stage {self.stage} needs {self.stage - 1} conditioning contacts")
        M = len(fused)
        cols = [fused] + [np.repeat(fused[c][None, :], M, axis=0) for c in cond]
        cols += [pts - pts[c] for c in cond]
        return np.hstack(cols)

    def logits(self, x: np.ndarray):
        z, tape = self.net.forward(x)
        return z[:, 0], tape

    def probs(self, fused, pts, cond=()) -> np.ndarray:
        z, _ = self.logits(self.inputs(fused, pts, tuple(cond)))
        return softmax(z)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def bce_softmax(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-point binary cross-entropy of softmax(z) against labels y, and d/dz."""
    M = len(z)
    logp = z - z.max()
    logp = logp - np.log(np.exp(logp).sum())
    p = np.exp(logp)
    q = np.clip(1.0 - p, 1e-300, None)
    loss = -(np.sum(y * logp) + np.sum((1 - y) * np.log(q))) / M
    # d/dz_j of sum_i g_i p_i with g = dL/dp, written without dividing by p
    a = -y + (1 - y) * p / q
    grad = (a - p * a.sum()) / M
    return float(loss), grad


# ---------------------------------------------------------------- model

class Pssn:
    def __init__(self, n_contacts: int = 3, seed: int = 0, normalize: bool = True):
        if n_contacts not in (2, 3):
            raise DomainError("n_contacts must be 2 or 3")
        self.n_contacts = n_contacts
        self.obj = ObjectFeatureNet(seed, normalize=normalize)
        self.fusion = FusionNet(seed + 1)
        self.stages = [StageNet(s, seed + 1 + s) for s in range(1, n_contacts + 1)]

    def stage_params(self, s: int) -> list[np.ndarray]:
        """Parameters trained in stage s (1-based); stage 1 owns the feature trunk."""
        if s == 1:
            return self.obj.params + self.fusion.net.params + self.stages[0].net.params
        return self.stages[s - 1].net.params

    def fused(self, cloud: PointCloud, grip: np.ndarray) -> np.ndarray:
        obj = self.obj(cloud)
        return self.fusion.forward(grip, obj)[0]

    def nets(self) -> dict[str, Sequential]:
        d = dict(self.obj.nets)
        d["fusion"] = self.fusion.net
        for st in self.stages:
            d[f"stage{st.stage}"] = st.net
        return d

    def save(self, path, meta: dict[str, str] | None = None) -> None:
        m = {"n_contacts": str(self.n_contacts), "normalize": str(int(self.obj.normalize))}
        m.update(meta or {})
        save_checkpoint(path, self.nets(), m)

    @classmethod
    def load(cls, path) -> tuple["Pssn", dict[str, str]]:
        nets, meta = load_checkpoint(path)
        model = cls(int(meta["n_contacts"]), normalize=bool(int(meta.get("normalize", 1))))
        for name, net in model.nets().items():
            if name not in nets:
                raise FormatError(f"{path}: checkpoint lacks {name}")
            if nets[name].spec() != net.spec():
                raise FormatError(f"{path}: {name} architecture mismatch")
            net.copy_from(nets[name])
        return model, meta


# ---------------------------------------------------------------- selection

@dataclass
class ContactPointSet:
    indices: tuple[int, ...]
    points: np.ndarray
    normals: np.ndarray | None
    prob: float
    gqs: float | None = None


def _topk(p: np.ndarray, k: int, exclude=()) -> np.ndarray:
    """Indices of the k largest entries; ties go to the lower index."""
    order = np.lexsort((np.arange(len(p)), -p))
    if exclude:
        order = order[~np.isin(order, list(exclude))]
    return order[:k]


def select_contacts(stages: list[StageNet], fused: np.ndarray, cloud: PointCloud,
                    k: tuple[int, ...] = (128, 64, 64), beam: int = 1,
                    stage_probs: list | None = None) -> list[ContactPointSet]:
    """Ranked contact sets from staged top-k selection.

    Stage s keeps its top k[s-1] points; the next stage is conditioned on the
    best `beam` of them. Sets are ranked by the product of stage probabilities.
    `stage_probs` may override the networks with callables
    (stage, cond) -> M-vector, which is how fixed distributions are injected.
    """
    M = len(cloud)
    n = len(stages) if stage_probs is None else len(stage_probs)
    if len(k) < n:
        raise DomainError(f"need {n} k values")
    for kk in k[:n]:
        if kk > M:
            raise DomainError(f"k={kk} exceeds cloud size {M}")
        if kk < 1:
            raise DomainError("k values must be positive")
    pts = cloud.points

    def probs(s: int, cond: tuple[int, ...]) -> np.ndarray:
        if stage_probs is not None:
            return np.asarray(stage_probs[s - 1](s, cond), dtype=float)
        return stages[s - 1].probs(fused, pts, cond)

    results: list[tuple[float, tuple[int, ...]]] = []

    def expand(prefix: tuple[int, ...], logp: float) -> None:
        s = len(prefix) + 1
        p = probs(s, prefix)
        top = _topk(p, k[s - 1], exclude=prefix)
        if s == n:
            for i in top:
                results.append((logp * p[i], prefix + (int(i),)))
            return
        for i in top[:beam]:
            expand(prefix + (int(i),), logp * p[i])

    expand((), 1.0)
    results.sort(key=lambda r: (-r[0], r[1]))
    return [ContactPointSet(idx, pts[list(idx)],
                            None if cloud.normals is None else cloud.normals[list(idx)], prob)
            for prob, idx in results]


# ---------------------------------------------------------------- datasets

@dataclass
class PssnDataset:
    records: list[GroundTruthRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, test_fraction: float, seed: int = 0) -> tuple["PssnDataset", "PssnDataset"]:
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self.records))
        n_test = int(round(test_fraction * len(self.records)))
        test = sorted(order[:n_test].tolist())
        train = sorted(order[n_test:].tolist())
        return (PssnDataset([self.records[i] for i in train]),
                PssnDataset([self.records[i] for i in test]))

    def save(self, index_path) -> None:
        """Line-delimited JSON index; clouds are written as sibling CSV files."""
        base = os.path.dirname(os.path.abspath(index_path))
        stem = os.path.splitext(os.path.basename(index_path))[0]
        with open(index_path, "w") as fh:
            for i, rec in enumerate(self.records):
                name = f"{stem}_{i:04d}.csv"
                save_cloud_csv(rec.cloud, os.path.join(base, name))
                stages = [s.tolist() for s in rec.stage_indices()]
                fh.write(json.dumps({"cloud": name, "gripper": rec.gripper,
                                     "sets": rec.sets.tolist(), "stages": stages}) + "\n")

    @classmethod
    def load(cls, index_path) -> "PssnDataset":
        base = os.path.dirname(os.path.abspath(index_path))
        records = []
        with open(index_path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    cloud = load_cloud_csv(os.path.join(base, d["cloud"]))
                    sets = np.array(d["sets"], dtype=np.int64)
                    gripper = d["gripper"]
                except (KeyError, ValueError) as exc:
                    raise FormatError(f"{index_path}:{lineno}: {exc}") from None
                if sets.size and (sets.min() < 0 or sets.max() >= len(cloud)):
                    raise FormatError(f"{index_path}:{lineno}: contact index out of range")
                records.append(GroundTruthRecord(cloud, gripper, sets.reshape(len(sets), -1)))
        return cls(records)


def _near(pts: np.ndarray, targets: np.ndarray, tol: float) -> np.ndarray:
    if len(targets) == 0:
        return np.zeros(len(pts), dtype=bool)
    d, _ = cKDTree(targets).query(pts)
    return d <= tol


def stage_labels(rec: GroundTruthRecord, stage: int, cond: tuple[int, ...] = (),
                 tol: float = 0.005) -> np.ndarray:
    """0/1 labels: points within tol of a valid contact for this stage.

    Stage 1 accepts any member of any valid set. Later stages accept the
    remaining members of sets whose other members lie within tol of the
    conditioning contacts.
    """
    pts = rec.cloud.points
    if stage == 1:
        return _near(pts, pts[np.unique(rec.sets)] if rec.sets.size else np.zeros((0, 3)), tol).astype(float)
    y = _near(pts, _partners_within(rec, cond, tol), tol)
    y[list(cond)] = False
    return y.astype(float)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: Pssn
    losses: list[list[float]] = field(default_factory=list)
    accuracy: list[list[dict]] = field(default_factory=list)


def _record_feature(features: dict[str, np.ndarray], rec: GroundTruthRecord) -> np.ndarray:
    if rec.gripper not in features:
        raise UsageError(f"no gripper feature for {rec.gripper!r}")
    return features[rec.gripper]


def _teacher_condition(rec: GroundTruthRecord, stage: int, rng: np.random.Generator) -> tuple[int, ...]:
    s = rec.sets[rng.integers(len(rec.sets))]
    order = rng.permutation(len(s))
    return tuple(int(s[j]) for j in order[:stage - 1])


def train_pssn(dataset: PssnDataset, gripper_features: dict[str, np.ndarray], epochs=(220, 220, 220),
               lr: float = 2e-3, seed: int = 0, n_contacts: int | None = None, batch: int = 8,
               eval_set: PssnDataset | None = None, eval_every: int = 0, tol: float = 0.005,
               model: Pssn | None = None, cond_samples: int = 4) -> TrainResult:
    """Train the stages one after another; earlier stages stay frozen.

    Later stages draw `cond_samples` teacher-forced conditioning contacts per
    record and step (members of a ground-truth set).
    """
    recs = [r for r in dataset.records if r.sets.size]
    if not recs:
        raise UsageError("dataset has no records with ground-truth sets")
    n = n_contacts or recs[0].sets.shape[1]
    model = model or Pssn(n, seed)
    if isinstance(epochs, int):
        epochs = (epochs,) * n
    rng = np.random.default_rng(seed)
    result = TrainResult(model)
    fused_cache: list[np.ndarray] | None = None
    for stage in range(1, n + 1):
        params = model.stage_params(stage)
        opt = Adam(params, lr=lr)
        head = model.stages[stage - 1]
        curve, acc_curve = [], []
        if stage == 2:
            # trunk is frozen from here on
            fused_cache = [model.fused(r.cloud, _record_feature(gripper_features, r)) for r in recs]
        for epoch in range(epochs[stage - 1]):
            order = rng.permutation(len(recs))
            total = 0.0
            for start in range(0, len(order), batch):
                grads = [np.zeros_like(p) for p in params]
                for i in order[start:start + batch]:
                    rec = recs[i]
                    if stage == 1:
                        loss, g = _stage1_grads(model, rec, _record_feature(gripper_features, rec), tol)
                        total += loss
                        for acc, gi in zip(grads, g):
                            acc += gi
                        continue
                    for _ in range(cond_samples):
                        cond = _teacher_condition(rec, stage, rng)
                        y = stage_labels(rec, stage, cond, tol)
                        x = head.inputs(fused_cache[i], rec.cloud.points, cond)
                        z, tape = head.logits(x)
                        loss, gz = bce_softmax(z, y)
                        _, g = head.net.backward(tape, gz[:, None])
                        total += loss / cond_samples
                        for acc, gi in zip(grads, g):
                            acc += gi / cond_samples
                if not np.isfinite(total):
                    raise NumericError(f"stage {stage} loss is not finite at epoch {epoch + 1}")
                opt.step(grads)
            curve.append(total / len(recs))
            if eval_set is not None and eval_every and (epoch + 1) % eval_every == 0:
                acc_curve.append(eval_topk(model, eval_set, gripper_features, tol)[stage - 1])
        log.info("stage %d final loss %.5f", stage, curve[-1] if curve else float("nan"))
        result.losses.append(curve)
        result.accuracy.append(acc_curve)
    return result


def _stage1_grads(model: Pssn, rec: GroundTruthRecord, grip: np.ndarray, tol: float):
    obj, t_obj = model.obj.forward(rec.cloud)
    fused, t_fuse = model.fusion.forward(grip, obj)
    head = model.stages[0]
    z, t_head = head.logits(head.inputs(fused, rec.cloud.points, ()))
    loss, gz = bce_softmax(z, stage_labels(rec, 1, (), tol))
    g_fused, g_head = head.net.backward(t_head, gz[:, None])
    g_obj, g_fuse = model.fusion.backward(t_fuse, g_fused)
    g_trunk = model.obj.backward(t_obj, g_obj)
    return loss, g_trunk + g_fuse + g_head


# ---------------------------------------------------------------- evaluation

def _rank(p: np.ndarray, exclude=()) -> np.ndarray:
    return _topk(p, len(p), exclude)


def eval_topk(model: Pssn | None, dataset: PssnDataset, gripper_features: dict[str, np.ndarray] | None = None,
              tol: float = 0.005, scorer=None, seed: int = 0) -> list[dict]:
    """Per-stage Top1/Top10 percentages.

    Stage s > 1 is conditioned on the predicted top-1 contacts of the earlier
    stages. `scorer(rec, stage, cond) -> M-vector` replaces the model, e.g. a
    random baseline.
    """
    recs = [r for r in dataset.records if r.sets.size]
    if not recs:
        return []
    n = recs[0].sets.shape[1]
    hits1 = np.zeros(n)
    hits10 = np.zeros(n)
    for rec in recs:
        if scorer is None:
            fused = model.fused(rec.cloud, _record_feature(gripper_features, rec))
            score = lambda s, cond: model.stages[s - 1].probs(fused, rec.cloud.points, cond)
        else:
            score = lambda s, cond: scorer(rec, s, cond)
        cond: tuple[int, ...] = ()
        for s in range(1, n + 1):
            order = _rank(score(s, cond), exclude=cond)
            # a prediction counts if it lies within tol of a valid contact
            targets = _partners_within(rec, cond, tol)
            ok = _near(rec.cloud.points[order[:10]], targets, tol)
            hits1[s - 1] += bool(ok[:1].any())
            hits10[s - 1] += bool(ok.any())
            cond = cond + (int(order[0]),)
    return [{"top1": 100.0 * hits1[s] / len(recs), "top10": 100.0 * hits10[s] / len(recs)} for s in range(n)]


def _partners_within(rec: GroundTruthRecord, cond: tuple[int, ...], tol: float) -> np.ndarray:
    pts = rec.cloud.points
    out = []
    for s in rec.sets:
        members = pts[s]
        used = []
        ok = True
        for c in cond:
            d = np.linalg.norm(members - pts[c], axis=1)
            d[used] = np.inf
            j = int(np.argmin(d))
            if d[j] > tol:
                ok = False
                break
            used.append(j)
        if ok:
            out.extend(members[[j for j in range(len(s)) if j not in used]])
    return np.array(out).reshape(-1, 3)


def random_scorer(seed: int = 0):
    rng = np.random.default_rng(seed)

    def score(rec, stage, cond):
        return rng.random(len(rec.cloud))
    return score
