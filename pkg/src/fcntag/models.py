"""Architecture descriptions, instantiated models and checkpoints.

A :class:`ModelSpec` is an immutable description of a layer ladder.  FCN
specs are stacks of ``conv -> bn -> relu -> maxpool -> dropout`` blocks that
shrink the input plane to 1x1, followed by a 1x1 convolution head with a
sigmoid.  The MFCC network applies shared per-frame dense layers (realised as
1x1 convolutions over the frame axis), takes a global max over time and ends
in a dense sigmoid head.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, InvalidConfigError
from .frontend import FeatureKind, FeatureMatrix
from .layers import BatchNorm, Conv2D, Dense, Dropout
from .tensor import Tensor, no_grad

PRED_CLAMP = 1e-7

# published ladders: (channels, (freq_pool, time_pool)) per block
_FCN_LADDERS = {
    3: ([256, 768, 2048], [(3, 5), (4, 16), (8, 17)]),
    4: ([128, 384, 768, 2048], [(2, 4), (4, 5), (3, 8), (4, 8)]),
    5: ([128, 256, 512, 1024, 2048], [(2, 4), (2, 4), (2, 4), (3, 5), (4, 4)]),
}
_EXTRA_1X1 = {6: 1, 7: 2}
_STFT_FREQ_POOLS = {4: [3, 4, 3, 3]}
MFCC_HIDDEN = (256, 512, 1024)

MODEL_NAMES = ("fcn3", "fcn4", "fcn5", "fcn6", "fcn7", "mfcc4", "fcn4-stft")


class InvalidSpecError(InvalidConfigError):
    pass


class InvalidLadderError(InvalidSpecError):
    def __init__(self, message: str, block: int):
        super().__init__(message)
        self.block = block


@dataclass(frozen=True)
class Block:
    """One stage of a ladder.

    ``kind`` is ``"conv"`` (2-d convolution with a ``kernel``-sized square
    kernel) or ``"frame_dense"`` (the same dense map applied to every frame).
    """

    kind: str
    channels: int
    kernel: int = 3
    pool: tuple[int, int] | None = None
    dropout: float = 0.0
    batchnorm: bool = True


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_kind: FeatureKind
    input_shape: tuple[int, int]
    blocks: tuple[Block, ...]
    output_dim: int = 50
    head: str = "conv1x1"

    def canonical(self) -> str:
        d = dataclasses.asdict(self)
        d["input_kind"] = self.input_kind.name
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_canonical(cls, text: str) -> "ModelSpec":
        d = json.loads(text)
        blocks = tuple(
            Block(**{**b, "pool": tuple(b["pool"]) if b["pool"] is not None else None})
            for b in d["blocks"])
        return cls(name=d["name"], input_kind=FeatureKind[d["input_kind"]],
                   input_shape=tuple(d["input_shape"]), blocks=blocks,
                   output_dim=d["output_dim"], head=d["head"])

    @property
    def frame_based(self) -> bool:
        return any(b.kind == "frame_dense" for b in self.blocks)

    def with_output_dim(self, k: int) -> "ModelSpec":
        return dataclasses.replace(self, output_dim=int(k))


def fcn_spec(n_layers: int, input_kind="mel", *, n_frames: int = 1366, n_bands: int | None = None,
             channels=None, pools=None, output_dim: int = 50) -> ModelSpec:
    """FCN-3..7 ladder; ``channels``/``pools`` override the published widths and pools."""
    if n_layers not in (3, 4, 5, 6, 7):
        raise InvalidSpecError(f"unsupported FCN depth {n_layers}; choose 3..7")
    kind = FeatureKind.parse(input_kind)
    if kind is FeatureKind.MFCC_STACK:
        raise InvalidSpecError("FCN specs take mel or STFT input; use mfcc_spec() for MFCCs")
    base = n_layers if n_layers <= 5 else 5
    ch, pl = _FCN_LADDERS[base]
    ch = list(channels) if channels is not None else list(ch)
    pl = [tuple(p) for p in pools] if pools is not None else list(pl)
    if kind is FeatureKind.LOG_STFT and pools is None and base in _STFT_FREQ_POOLS:
        pl = [(f, t) for f, (_, t) in zip(_STFT_FREQ_POOLS[base], pl)]
    if len(ch) != len(pl) or len(ch) != base:
        raise InvalidSpecError(f"FCN-{n_layers} needs {base} channel counts and pools")
    if n_bands is None:
        n_bands = 96 if kind is FeatureKind.LOG_MEL else 129
    blocks = [Block("conv", c, 3, p, 0.5) for c, p in zip(ch, pl)]
    blocks += [Block("conv", 1024, 1) for _ in range(_EXTRA_1X1.get(n_layers, 0))]
    name = f"fcn{n_layers}" + ("-stft" if kind is FeatureKind.LOG_STFT else "")
    return ModelSpec(name, kind, (n_bands, n_frames), tuple(blocks), output_dim, "conv1x1")


def mfcc_spec(*, n_frames: int = 1366, n_coeffs: int = 90, hidden=MFCC_HIDDEN,
              output_dim: int = 50) -> ModelSpec:
    """Frame-wise 4-layer network: three shared dense layers, time max, dense head."""
    hidden = list(hidden)
    blocks = [Block("frame_dense", h, 1) for h in hidden[:-1]]
    blocks.append(Block("frame_dense", hidden[-1], 1, (1, n_frames), 0.5))
    return ModelSpec("mfcc4", FeatureKind.MFCC_STACK, (n_coeffs, n_frames), tuple(blocks),
                     output_dim, "dense")


def spec_by_name(name: str, **overrides) -> ModelSpec:
    name = name.lower()
    if name == "mfcc4":
        return mfcc_spec(**overrides)
    if name == "fcn4-stft":
        return fcn_spec(4, "stft", **overrides)
    if name.startswith("fcn") and name[3:].isdigit():
        return fcn_spec(int(name[3:]), "mel", **overrides)
    raise InvalidSpecError(f"unknown model {name!r}; valid names: {', '.join(MODEL_NAMES)}")


def _entry_plane(spec: ModelSpec) -> tuple[int, int, int]:
    bands, frames = spec.input_shape
    return (1, frames, bands) if spec.frame_based else (bands, frames, 1)


def shape_trace(spec: ModelSpec) -> list[tuple[int, int, int]]:
    """(H, W, D) after each block, with floor pooling.  Must end at 1x1."""
    h, w, _ = _entry_plane(spec)
    trace = []
    for i, b in enumerate(spec.blocks):
        if b.pool is not None:
            ph, pw = b.pool
            if h // ph < 1 or w // pw < 1:
                raise InvalidLadderError(
                    f"block {i}: pool {b.pool} does not fit a {h}x{w} plane", i)
            h, w = h // ph, w // pw
        trace.append((h, w, b.channels))
    if (h, w) != (1, 1):
        raise InvalidLadderError(f"ladder ends at {h}x{w}, not 1x1 (block {len(spec.blocks) - 1})",
                                 len(spec.blocks) - 1)
    return trace


def param_count(spec: ModelSpec) -> tuple[int, list[dict]]:
    """Learned parameter total plus per-layer rows ``{name, learned, stats}``."""
    shape_trace(spec)
    rows = []
    d_in = _entry_plane(spec)[2]
    for i, b in enumerate(spec.blocks):
        k = b.kernel
        if b.kind == "frame_dense":
            rows.append({"name": f"block{i}.dense", "learned": d_in * b.channels + b.channels, "stats": 0})
        else:
            rows.append({"name": f"block{i}.conv", "learned": k * k * d_in * b.channels + b.channels,
                         "stats": 0})
        if b.batchnorm:
            rows.append({"name": f"block{i}.bn", "learned": 2 * b.channels, "stats": 2 * b.channels})
        d_in = b.channels
    rows.append({"name": "head", "learned": d_in * spec.output_dim + spec.output_dim, "stats": 0})
    return sum(r["learned"] for r in rows), rows


class Model:
    """Instantiated parameters for a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        shape_trace(spec)
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.training = False
        init_rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng([seed, 1])
        self.blocks: list[dict] = []
        d_in = _entry_plane(spec)[2]
        for b in spec.blocks:
            layers = {"conv": Conv2D(d_in, b.channels, b.kernel, init_rng, self.dtype)}
            if b.batchnorm:
                layers["bn"] = BatchNorm(b.channels, dtype=self.dtype)
                layers["bn"].set_prior()
            if b.dropout:
                layers["dropout"] = Dropout(b.dropout, self.dropout_rng)
            self.blocks.append(layers)
            d_in = b.channels
        if spec.head == "dense":
            self.head = Dense(d_in, spec.output_dim, init_rng, self.dtype)
        else:
            self.head = Conv2D(d_in, spec.output_dim, 1, init_rng, self.dtype)

    # ------------------------------------------------------------ parameters
    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layers in enumerate(self.blocks):
            for lname, layer in layers.items():
                for pname, p in layer.parameters().items():
                    out[f"block{i}.{lname}.{pname}"] = p
        for pname, p in self.head.parameters().items():
            out[f"head.{pname}"] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def batchnorms(self) -> dict[str, BatchNorm]:
        return {f"block{i}.bn": layers["bn"] for i, layers in enumerate(self.blocks) if "bn" in layers}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    # ------------------------------------------------------------ forward
    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            arr = x
        else:
            if isinstance(x, FeatureMatrix):
                x = [x]
            if isinstance(x, (list, tuple)) and x and isinstance(x[0], FeatureMatrix):
                for fm in x:
                    if fm.kind is not self.spec.input_kind:
                        raise ContractError(
                            f"model expects {self.spec.input_kind.name} features, got {fm.kind.name}")
                x = np.stack([fm.data for fm in x])
            arr = Tensor(np.asarray(x, dtype=self.dtype))
        if arr.ndim != 3 or tuple(arr.shape[1:]) != tuple(self.spec.input_shape):
            raise ContractError(
                f"model expects N x {self.spec.input_shape[0]} x {self.spec.input_shape[1]} input, "
                f"got {arr.shape}")
        n, bands, frames = arr.shape
        if self.spec.frame_based:
            return T.reshape(arr, (n, bands, 1, frames))
        return T.reshape(arr, (n, 1, bands, frames))

    def forward(self, x) -> Tensor:
        """Sigmoid scores, shape N x output_dim."""
        h = self._as_input(x)
        train = self.training
        for b, layers in zip(self.spec.blocks, self.blocks):
            h = layers["conv"](h)
            if "bn" in layers:
                h = layers["bn"](h, train)
            # relu is monotone, so pooling first gives identical values and
            # gradients on a tensor ph*pw times smaller
            if b.pool is not None:
                h = T.maxpool2d(h, b.pool)
            h = T.relu(h)
            if "dropout" in layers:
                h = layers["dropout"](h, train)
        n, c = h.shape[0], h.shape[1]
        if self.spec.head == "dense":
            h = self.head(T.reshape(h, (n, c)))
        else:
            h = T.reshape(self.head(h), (n, self.spec.output_dim))
        return T.sigmoid(h)

    __call__ = forward

    def predict(self, features, batch_size: int = 32) -> np.ndarray:
        """Infer-mode scores clamped into (0, 1); batch composition never matters."""
        was = self.training
        self.eval()
        try:
            if isinstance(features, FeatureMatrix):
                features = [features]
            n = len(features)
            out = []
            with no_grad():
                for s in range(0, n, batch_size):
                    out.append(self.forward(features[s:s + batch_size]).data)
        finally:
            self.training = was
        scores = np.concatenate(out, axis=0) if out else np.zeros((0, self.spec.output_dim), self.dtype)
        return np.clip(scores, PRED_CLAMP, 1.0 - PRED_CLAMP).astype(self.dtype)


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    return Model(spec, seed, dtype)


def predict(model: Model, features, batch_size: int = 32) -> np.ndarray:
    return model.predict(features, batch_size)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"FCNC"
CKPT_VERSION = 1


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(model: Model, path) -> None:
    """Write spec, parameters and batch-norm statistics as 32-bit floats."""
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    spec_raw = model.spec.canonical().encode("utf-8")
    parts += [struct.pack("<I", len(spec_raw)), spec_raw, struct.pack("<q", model.seed)]
    params = model.named_parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, p in params.items():
        parts.append(_pack_name(name))
        parts.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    bns = model.batchnorms()
    parts.append(struct.pack("<I", len(bns)))
    for name, bn in bns.items():
        parts.append(_pack_name(name))
        ready = bn.running_mean is not None
        parts.append(struct.pack("<BII", int(ready), bn.n_updates, bn.channels))
        if ready:
            parts.append(np.asarray(bn.running_mean, dtype="<f4").tobytes())
            parts.append(np.asarray(bn.running_var, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise ContractError(f"{self.path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ContractError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def name(self) -> str:
        (n,) = self.take("<H")
        return self.bytes(n).decode("utf-8")

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.bytes(4 * count), dtype="<f4").astype(np.float32)


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.bytes(4) != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.take("<H")
    if version != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    (spec_len,) = r.take("<I")
    spec = ModelSpec.from_canonical(r.bytes(spec_len).decode("utf-8"))
    (seed,) = r.take("<q")
    model = Model(spec, seed, np.float32)
    params = model.named_parameters()
    (n_params,) = r.take("<I")
    if n_params != len(params):
        raise ContractError(f"{path}: expected {len(params)} parameters, found {n_params}")
    for _ in range(n_params):
        name = r.name()
        (ndim,) = r.take("<B")
        shape = r.take(f"<{ndim}I")
        if name not in params or tuple(params[name].shape) != tuple(shape):
            raise ContractError(f"{path}: parameter {name} {shape} does not match the model description")
        params[name].data = r.floats(int(np.prod(shape))).reshape(shape)
    bns = model.batchnorms()
    (n_bn,) = r.take("<I")
    for _ in range(n_bn):
        name = r.name()
        ready, n_updates, ch = r.take("<BII")
        bn = bns[name]
        bn.n_updates = n_updates
        if ready:
            bn.running_mean = r.floats(ch)
            bn.running_var = r.floats(ch)
        else:
            bn.running_mean = bn.running_var = None
    return model
