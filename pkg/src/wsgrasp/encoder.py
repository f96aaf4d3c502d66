"""Workspace autoencoder: a pointwise-conv + max-pool encoder to a 256-d
gripper feature, and a dense decoder back to an L x 3N workspace.

Grippers with fewer fingers than the encoder's slot count are zero padded, so
one set of weights serves every gripper.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError
from .grippers import GripperModel
from .nn import Adam, Linear, MaxPoolRows, ReLU, Sequential, load_checkpoint, save_checkpoint
from .workspace import WorkspaceMatrix, coupled_chamfer_grad, sample_workspace

log = logging.getLogger(__name__)

FEATURE_DIM = 256
ENCODER_WIDTHS = (64, 64, 64, 128, 256, 256)
DECODER_HIDDEN = (256, 512)


@dataclass
class EncoderNet:
    net: Sequential
    n_slots: int = 3

    @classmethod
    def create(cls, n_slots: int = 3, seed: int = 0) -> "EncoderNet":
        rng = np.random.default_rng(seed)
        layers = []
        w = 3 * n_slots
        for out in ENCODER_WIDTHS:
            layers += [Linear(w, out, "conv1d-k1", rng), ReLU(out)]
            w = out
        layers.append(MaxPoolRows(w))
        return cls(Sequential(layers), n_slots)


@dataclass
class DecoderNet:
    net: Sequential
    L: int
    n_slots: int = 3

    @classmethod
    def create(cls, L: int, n_slots: int = 3, seed: int = 1) -> "DecoderNet":
        rng = np.random.default_rng(seed)
        h1, h2 = DECODER_HIDDEN
        net = Sequential([
            Linear(FEATURE_DIM, h1, "dense", rng), ReLU(h1),
            Linear(h1, h2, "dense", rng), ReLU(h2),
            Linear(h2, L * 3 * n_slots, "dense", rng, scale=0.1),
        ])
        return cls(net, L, n_slots)


@dataclass(frozen=True)
class Normalization:
    center: np.ndarray
    scale: float

    def apply(self, S: np.ndarray) -> np.ndarray:
        n = S.shape[1] // 3
        return (S - np.tile(self.center, n)) / self.scale

    def undo(self, S: np.ndarray) -> np.ndarray:
        n = S.shape[1] // 3
        return S * self.scale + np.tile(self.center, n)


def normalization_for(S: np.ndarray) -> Normalization:
    # bounding-box centre rather than the mean: min/max do not depend on row
    # order, which keeps the feature bit-identical under row permutation
    pts = np.asarray(S).reshape(-1, 3)
    c = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    r = float(np.max(np.linalg.norm(pts - c, axis=1)))
    return Normalization(c, r if r > 0 else 1.0)


def _padded(S: np.ndarray, n_slots: int) -> np.ndarray:
    width = S.shape[1]
    if width % 3 or width // 3 > n_slots:
        raise DomainError(f"workspace width {width} does not fit an encoder with {n_slots} finger slots")
    if width == 3 * n_slots:
        return S
    return np.hstack([S, np.zeros((S.shape[0], 3 * n_slots - width))])


def _prepare(enc: EncoderNet, S, normalize: bool) -> np.ndarray:
    arr = S.S if isinstance(S, WorkspaceMatrix) else np.asarray(S, dtype=float)
    if normalize:
        arr = normalization_for(arr).apply(arr)
    return _padded(arr, enc.n_slots)


def extract_gripper_feature(enc: EncoderNet, S, normalize: bool = True) -> np.ndarray:
    """1 x 256 feature; invariant to the row order of S."""
    return enc.net(_prepare(enc, S, normalize))


def reconstruct(dec: DecoderNet, feature: np.ndarray, n_fingers: int | None = None) -> np.ndarray:
    """Decode a 1 x 256 feature into an L x 3N array (normalized units)."""
    feature = np.asarray(feature, dtype=float).reshape(1, -1)
    if feature.shape[1] != FEATURE_DIM:
        raise DomainError(f"feature width {feature.shape[1]} != {FEATURE_DIM}")
    out = dec.net(feature).reshape(dec.L, 3 * dec.n_slots)
    n = dec.n_slots if n_fingers is None else n_fingers
    return out[:, :3 * n]


@dataclass
class AutoencoderRun:
    encoder: EncoderNet
    decoder: DecoderNet
    losses: list[float] = field(default_factory=list)
    workspaces: dict[str, WorkspaceMatrix] = field(default_factory=dict)


def autoencoder_loss(enc: EncoderNet, dec: DecoderNet, S: WorkspaceMatrix):
    """Coupled Chamfer loss of one workspace and the gradients of both nets."""
    x = _prepare(enc, S, normalize=True)
    feat, enc_tape = enc.net.forward(x)
    out, dec_tape = dec.net.forward(feat)
    recon = out.reshape(dec.L, 3 * dec.n_slots)
    target = x[:, :3 * S.N]
    loss, g = coupled_chamfer_grad(target, recon[:, :3 * S.N], S.N)
    g_full = np.zeros_like(recon)
    g_full[:, :3 * S.N] = g
    g_feat, dec_grads = dec.net.backward(dec_tape, g_full.reshape(1, -1))
    _, enc_grads = enc.net.backward(enc_tape, g_feat)
    return loss, enc_grads, dec_grads


def train_autoencoder(grippers: GripperModel | list[GripperModel], L: int = 512, epochs: int = 200,
                      lr: float = 2e-3, seed: int = 0, n_slots: int = 3,
                      workspaces: dict[str, WorkspaceMatrix] | None = None) -> AutoencoderRun:
    """Adam on the summed coupled Chamfer loss; one step per epoch over all grippers."""
    if isinstance(grippers, GripperModel):
        grippers = [grippers]
    if not grippers:
        raise DomainError("need at least one gripper")
    enc = EncoderNet.create(n_slots, seed)
    dec = DecoderNet.create(L, n_slots, seed + 1)
    ws = dict(workspaces or {})
    for i, g in enumerate(grippers):
        if g.name not in ws:
            ws[g.name] = sample_workspace(g, L, seed + 17 * i)
        if ws[g.name].L != L:
            raise DomainError(f"workspace for {g.name} has {ws[g.name].L} rows, expected {L}")
    opt_enc = Adam(enc.net.params, lr=lr)
    opt_dec = Adam(dec.net.params, lr=lr)
    run = AutoencoderRun(enc, dec, [], ws)
    for epoch in range(epochs):
        total = 0.0
        g_enc = [np.zeros_like(p) for p in enc.net.params]
        g_dec = [np.zeros_like(p) for p in dec.net.params]
        for g in grippers:
            loss, ge, gd = autoencoder_loss(enc, dec, ws[g.name])
            total += loss
            for acc, x in zip(g_enc, ge):
                acc += x
            for acc, x in zip(g_dec, gd):
                acc += x
        if not np.isfinite(total):
            raise NumericError(f"autoencoder loss diverged at epoch {epoch + 1}")
        run.losses.append(total)
        opt_enc.step(g_enc)
        opt_dec.step(g_dec)
        if (epoch + 1) % 50 == 0:
            log.info("autoencoder epoch %d loss %.6g", epoch + 1, total)
    return run


def save_autoencoder(path, enc: EncoderNet, dec: DecoderNet | None = None) -> None:
    nets = {"encoder": enc.net}
    meta = {"n_slots": str(enc.n_slots)}
    if dec is not None:
        nets["decoder"] = dec.net
        meta["L"] = str(dec.L)
    save_checkpoint(path, nets, meta)


def load_autoencoder(path) -> tuple[EncoderNet, DecoderNet | None]:
    nets, meta = load_checkpoint(path)
    n_slots = int(meta.get("n_slots", 3))
    enc = EncoderNet(nets["encoder"], n_slots)
    dec = DecoderNet(nets["decoder"], int(meta["L"]), n_slots) if "decoder" in nets else None
    return enc, dec
