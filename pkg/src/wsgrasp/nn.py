"""Small float64 neural-network core with hand-written reverse mode.

Every layer maps an R x C array to an R x C' array. ``conv1d-k1`` is a
pointwise convolution, i.e. the same affine map applied to each row; ``dense``
is the same arithmetic on a single feature row (or a batch of independent rows).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, FormatError, NumericError, UsageError

__all__ = [
    "Linear",
    "ReLU",
    "Tanh",
    "SoftmaxRows",
    "MaxPoolRows",
    "Sequential",
    "mlp",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
]

KINDS = ("dense", "conv1d-k1", "relu", "tanh", "softmax-rows", "maxpool-rows")


def _check_finite(y: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(y)):
        raise NumericError(f"non-finite values after {where}")
    return y


class Layer:
    kind = ""
    params: list[np.ndarray] = []

    def __init__(self, width_in: int, width_out: int):
        if width_in < 1 or width_out < 1:
            raise DomainError("layer widths must be positive")
        self.width_in = width_in
        self.width_out = width_out
        self.params = []

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, cache, gy: np.ndarray):
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, width_in: int, width_out: int, kind: str = "dense",
                 rng: np.random.Generator | None = None, scale: float = 1.0):
        super().__init__(width_in, width_out)
        if kind not in ("dense", "conv1d-k1"):
            raise DomainError(f"linear layer kind must be dense or conv1d-k1, not {kind!r}")
        self.kind = kind
        rng = rng if rng is not None else np.random.default_rng(0)
        # uniform He scaling
        bound = scale * np.sqrt(6.0 / width_in)
        self.W = rng.uniform(-bound, bound, size=(width_in, width_out))
        self.b = np.zeros(width_out)
        self.params = [self.W, self.b]

    def forward(self, x):
        if x.shape[1] != self.width_in:
            raise DomainError(f"{self.kind}: input width {x.shape[1]} != {self.width_in}")
        return x @ self.W + self.b, x

    def backward(self, x, gy):
        return gy @ self.W.T, [x.T @ gy, gy.sum(axis=0)]


class ReLU(Layer):
    kind = "relu"

    def __init__(self, width: int):
        super().__init__(width, width)

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, gy):
        return gy * mask, []


class Tanh(Layer):
    kind = "tanh"

    def __init__(self, width: int):
        super().__init__(width, width)

    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, y, gy):
        return gy * (1.0 - y * y), []


class SoftmaxRows(Layer):
    kind = "softmax-rows"

    def __init__(self, width: int):
        super().__init__(width, width)

    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)
        return y, y

    def backward(self, y, gy):
        return y * (gy - np.sum(gy * y, axis=1, keepdims=True)), []


class MaxPoolRows(Layer):
    """R x C -> 1 x C column-wise max; ties route the gradient to the first row."""
    kind = "maxpool-rows"

    def __init__(self, width: int):
        super().__init__(width, width)

    def forward(self, x):
        idx = np.argmax(x, axis=0)
        return x[idx, np.arange(x.shape[1])][None, :], (idx, x.shape[0])

    def backward(self, cache, gy):
        idx, rows = cache
        gx = np.zeros((rows, gy.shape[1]))
        gx[idx, np.arange(gy.shape[1])] = gy[0]
        return gx, []


def _make_layer(kind: str, width_in: int, width_out: int) -> Layer:
    if kind in ("dense", "conv1d-k1"):
        return Linear(width_in, width_out, kind)
    cls = {"relu": ReLU, "tanh": Tanh, "softmax-rows": SoftmaxRows, "maxpool-rows": MaxPoolRows}.get(kind)
    if cls is None:
        raise FormatError(f"unknown layer kind {kind!r}")
    return cls(width_in)


class Sequential:
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.width_out != b.width_in:
                raise DomainError(f"shape chain broken: {a.kind} out {a.width_out} -> {b.kind} in {b.width_in}")

    @property
    def width_in(self) -> int:
        return self.layers[0].width_in

    @property
    def width_out(self) -> int:
        return self.layers[-1].width_out

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def forward(self, x) -> tuple[np.ndarray, list]:
        """Output and the per-layer tape needed by `backward`."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            raise DomainError("network input must be a 2-D array")
        tape = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            tape.append(cache)
        return _check_finite(x, "forward pass"), tape

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape, gy) -> tuple[np.ndarray, list[np.ndarray]]:
        """Input gradient and parameter gradients (aligned with `params`)."""
        if tape is None or len(tape) != len(self.layers):
            raise UsageError("backward called without a matching forward tape")
        gy = np.asarray(gy, dtype=float)
        grads: list[list[np.ndarray]] = []
        for layer, cache in zip(reversed(self.layers), reversed(tape)):
            gy, g = layer.backward(cache, gy)
            grads.append(g)
        flat = [g for group in reversed(grads) for g in group]
        return gy, flat

    def zero_(self) -> "Sequential":
        for p in self.params:
            p[...] = 0.0
        return self

    def copy_from(self, other: "Sequential") -> None:
        for p, q in zip(self.params, other.params):
            p[...] = q

    def clone(self) -> "Sequential":
        net = Sequential([_make_layer(l.kind, l.width_in, l.width_out) for l in self.layers])
        net.copy_from(self)
        return net

    def spec(self) -> list[tuple[str, int, int]]:
        return [(l.kind, l.width_in, l.width_out) for l in self.layers]


def mlp(widths: Sequence[int], rng: np.random.Generator, kind: str = "dense",
        final_activation: str | None = None, final_scale: float = 1.0) -> Sequential:
    """Linear/ReLU stack; the last linear layer is left unactivated by default."""
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        last = i == len(widths) - 2
        layers.append(Linear(a, b, kind, rng, scale=final_scale if last else 1.0))
        if not last:
            layers.append(ReLU(b))
    if final_activation:
        layers.append(_make_layer(final_activation, widths[-1], widths[-1]))
    return Sequential(layers)


@dataclass
class Adam:
    params: list[np.ndarray]
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.params]
            self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Iterable[np.ndarray]) -> None:
        grads = list(grads)
        if len(grads) != len(self.params):
            raise DomainError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if p.shape != np.shape(g):
                raise DomainError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- checkpoints
# "TNN1" | u64 n_nets | per net: name, u64 n_layers, per layer: kind, u64 in,
# u64 out, u64 n_arrays, per array: u64 ndim, u64 dims..., f64 data
# | u64 meta length | utf-8 "key=value" lines. Strings are u64 length + utf-8.

def _wstr(out: list, s: str) -> None:
    b = s.encode()
    out.append(struct.pack("<Q", len(b)))
    out.append(b)


def save_checkpoint(path, nets: dict[str, Sequential], meta: dict[str, str] | None = None) -> None:
    out: list[bytes] = [b"TNN1", struct.pack("<Q", len(nets))]
    for name, net in nets.items():
        _wstr(out, name)
        out.append(struct.pack("<Q", len(net.layers)))
        for layer in net.layers:
            _wstr(out, layer.kind)
            out.append(struct.pack("<QQQ", layer.width_in, layer.width_out, len(layer.params)))
            for p in layer.params:
                out.append(struct.pack("<Q", p.ndim))
                out.append(struct.pack(f"<{p.ndim}Q", *p.shape))
                out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    text = "".join(f"{k}={v}\n" for k, v in (meta or {}).items())
    _wstr(out, text)
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        b = self.blob[self.pos:self.pos + n]
        self.pos += n
        return b

    def u64(self, n: int = 1):
        v = struct.unpack(f"<{n}Q", self.take(8 * n))
        return v if n > 1 else v[0]

    def string(self) -> str:
        return self.take(self.u64()).decode()


def load_checkpoint(path) -> tuple[dict[str, Sequential], dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != b"TNN1":
        raise FormatError(f"{path}: not a TNN1 checkpoint")
    r = _Reader(blob, path)
    r.pos = 4
    nets = {}
    for _ in range(r.u64()):
        name = r.string()
        layers = []
        for _ in range(r.u64()):
            kind = r.string()
            w_in, w_out, n_arrays = r.u64(3)
            layer = _make_layer(kind, w_in, w_out)
            if n_arrays != len(layer.params):
                raise FormatError(f"{path}: {kind} layer expects {len(layer.params)} arrays, file has {n_arrays}")
            for p in layer.params:
                ndim = r.u64()
                shape = (r.u64(ndim),) if ndim == 1 else tuple(r.u64(ndim))
                shape = tuple(int(s) for s in np.ravel(shape))
                if shape != p.shape:
                    raise FormatError(f"{path}: array shape {shape} != layer shape {p.shape}")
                p[...] = np.frombuffer(r.take(8 * p.size), dtype="<f8").reshape(shape)
            layers.append(layer)
        nets[name] = Sequential(layers)
    meta = {}
    for line in r.string().splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    return nets, meta
