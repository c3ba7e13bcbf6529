"""The three-path fusion network, the MFCC-only baseline, and checkpoint I/O.

Each path is conv(k=3) -> ReLU -> maxpool(2) -> conv(k=3) -> ReLU -> global
average pool, giving a fixed-width embedding whatever the clip length. The
fusion head concatenates the path embeddings in the fixed order
MFCC, LFCC, CHROMA and maps them through dense -> ReLU -> dense to a single
spoof logit.
"""

from __future__ import annotations

import enum
import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import (BadMagic, ChecksumMismatch, FingerprintMismatch, InputTooShort,
                     KindMismatch, TruncatedFile, UnsupportedVersion)
from .features import FeatureConfig, FeatureKind, FeatureMatrix, FeatureStats, STD_FLOOR
from .nn import Conv1d, Dense, GlobalAvgPool, MaxPool1d, Module, ReLU, sigmoid

CHECKPOINT_MAGIC = b"MFAA"
CHECKPOINT_VERSION = 1
CONCAT_ORDER = (FeatureKind.MFCC, FeatureKind.LFCC, FeatureKind.CHROMA)
MIN_FRAMES = 8


class ModelKind(enum.IntEnum):
    MFAAN = 1
    BASELINE = 2


@dataclass(frozen=True)
class ArchConfig:
    cepstral_rows: int = 40
    chroma_rows: int = 12
    conv1_channels: int = 32
    conv2_channels: int = 64
    kernel_size: int = 3
    fusion_hidden: int = 64
    baseline_hidden: int = 32

    def input_rows(self, kind: FeatureKind) -> int:
        return self.chroma_rows if kind is FeatureKind.CHROMA else self.cepstral_rows

    @classmethod
    def for_features(cls, fcfg: FeatureConfig, **overrides) -> "ArchConfig":
        return cls(cepstral_rows=fcfg.n_coeffs, **overrides)


class ConvPath(Module):
    def __init__(self, in_rows: int, arch: ArchConfig, rng=None, dtype=np.float32):
        k = arch.kernel_size
        self.conv1 = Conv1d(in_rows, arch.conv1_channels, k, rng=rng, dtype=dtype)
        self.relu1 = ReLU()
        self.pool = MaxPool1d()
        self.conv2 = Conv1d(arch.conv1_channels, arch.conv2_channels, k, rng=rng, dtype=dtype)
        self.relu2 = ReLU()
        self.gap = GlobalAvgPool()

    @property
    def out_dim(self) -> int:
        return self.conv2.out_channels

    def forward(self, x):
        if x.shape[-1] < MIN_FRAMES:
            raise InputTooShort(f"path needs at least {MIN_FRAMES} frames, got {x.shape[-1]}")
        h = self.pool.forward(self.relu1.forward(self.conv1.forward(x)))
        return self.gap.forward(self.relu2.forward(self.conv2.forward(h)))

    def backward(self, grad):
        g = self.relu2.backward(self.gap.backward(grad))
        g = self.conv2.backward(g)
        g = self.relu1.backward(self.pool.backward(g))
        return self.conv1.backward(g)


class _Classifier(Module):
    """Shared plumbing: path inputs, feature normalisation, dtype, metadata."""

    kind: ModelKind
    kinds: Tuple[FeatureKind, ...]

    def __init__(self, arch: ArchConfig, feature_config: FeatureConfig, seed: int):
        self.arch = arch
        self.feature_config = feature_config
        self.seed = seed
        self.norm: Dict[FeatureKind, FeatureStats] = {}

    @property
    def feature_fingerprints(self) -> Dict[str, str]:
        fps = self.feature_config.fingerprints()
        return {k.name: fps[k.name] for k in self.kinds}

    @property
    def dtype(self):
        return self.parameters()[0].value.dtype

    def paths(self) -> Dict[FeatureKind, ConvPath]:
        raise NotImplementedError

    def set_normalization(self, stats: Dict[FeatureKind, FeatureStats]):
        self.norm = {k: stats[k] for k in self.kinds}

    def normalize(self, kind: FeatureKind, x: np.ndarray) -> np.ndarray:
        stats = self.norm.get(kind)
        if stats is None:
            return x.astype(self.dtype, copy=False)
        mean = stats.mean.astype(self.dtype)[:, None]
        scale = np.maximum(stats.std, STD_FLOOR).astype(self.dtype)[:, None]
        return ((x - mean) / scale).astype(self.dtype, copy=False)

    def check_features(self, features: Dict[FeatureKind, FeatureMatrix], kinds=None):
        expected = self.feature_fingerprints
        for kind in self.kinds if kinds is None else kinds:
            fm = features.get(kind)
            if fm is None:
                raise KindMismatch(f"missing {kind.name} features")
            if fm.kind is not kind:
                raise KindMismatch(f"{kind.name} path received {FeatureKind(fm.kind).name} features")
            if fm.config_fingerprint != expected[kind.name]:
                raise FingerprintMismatch(expected[kind.name], fm.config_fingerprint,
                                          f"{kind.name} feature config")

    def forward_batch(self, batch: Dict[FeatureKind, np.ndarray]) -> np.ndarray:
        """Raw (unnormalised) feature arrays [B, rows, T] per kind -> logits [B]."""
        return self.forward(*(self.normalize(k, batch[k]) for k in self.kinds))

    def predict(self, features: Dict[FeatureKind, FeatureMatrix]) -> Tuple[float, float]:
        """(logit, spoof probability) for one clip's feature matrices."""
        self.check_features(features)
        logit = float(self.forward_batch({k: features[k].data[None] for k in self.kinds})[0])
        return logit, float(sigmoid(logit))

    def embedding(self, which: FeatureKind, fm: FeatureMatrix) -> np.ndarray:
        """Pre-fusion embedding of one path (normalisation applied)."""
        if which not in self.kinds:
            raise KindMismatch(f"model has no {which.name} path")
        self.check_features({which: fm}, kinds=(which,))
        return self.paths()[which].forward(self.normalize(which, fm.data[None]))[0]


class MfaanModel(_Classifier):
    kind = ModelKind.MFAAN
    kinds = CONCAT_ORDER

    def __init__(self, arch: ArchConfig = ArchConfig(),
                 feature_config: FeatureConfig = FeatureConfig(),
                 seed: int = 0, dtype=np.float32, init: bool = True):
        super().__init__(arch, feature_config, seed)
        rng = np.random.default_rng(seed) if init else None
        self.mfcc_path = ConvPath(arch.input_rows(FeatureKind.MFCC), arch, rng, dtype)
        self.lfcc_path = ConvPath(arch.input_rows(FeatureKind.LFCC), arch, rng, dtype)
        self.chroma_path = ConvPath(arch.input_rows(FeatureKind.CHROMA), arch, rng, dtype)
        fused = 3 * arch.conv2_channels
        self.fusion = Dense(fused, arch.fusion_hidden, rng, dtype)
        self.fusion_relu = ReLU()
        self.head = Dense(arch.fusion_hidden, 1, rng, dtype)

    def paths(self):
        return {FeatureKind.MFCC: self.mfcc_path, FeatureKind.LFCC: self.lfcc_path,
                FeatureKind.CHROMA: self.chroma_path}

    def forward(self, mfcc, lfcc, chroma):
        emb = [self.mfcc_path.forward(mfcc), self.lfcc_path.forward(lfcc),
               self.chroma_path.forward(chroma)]
        self._widths = [e.shape[1] for e in emb]
        fused = np.concatenate(emb, axis=1)
        h = self.fusion_relu.forward(self.fusion.forward(fused))
        return self.head.forward(h)[:, 0]

    def backward(self, grad_logits):
        g = self.head.backward(grad_logits[:, None])
        g = self.fusion.backward(self.fusion_relu.backward(g))
        splits = np.cumsum(self._widths)[:-1]
        g_m, g_l, g_c = np.split(g, splits, axis=1)
        return (self.mfcc_path.backward(g_m), self.lfcc_path.backward(g_l),
                self.chroma_path.backward(g_c))


class BaselineCnn(_Classifier):
    kind = ModelKind.BASELINE
    kinds = (FeatureKind.MFCC,)

    def __init__(self, arch: ArchConfig = ArchConfig(),
                 feature_config: FeatureConfig = FeatureConfig(),
                 seed: int = 0, dtype=np.float32, init: bool = True):
        super().__init__(arch, feature_config, seed)
        rng = np.random.default_rng(seed) if init else None
        self.mfcc_path = ConvPath(arch.input_rows(FeatureKind.MFCC), arch, rng, dtype)
        self.hidden = Dense(arch.conv2_channels, arch.baseline_hidden, rng, dtype)
        self.hidden_relu = ReLU()
        self.head = Dense(arch.baseline_hidden, 1, rng, dtype)

    def paths(self):
        return {FeatureKind.MFCC: self.mfcc_path}

    def forward(self, mfcc):
        h = self.hidden_relu.forward(self.hidden.forward(self.mfcc_path.forward(mfcc)))
        return self.head.forward(h)[:, 0]

    def backward(self, grad_logits):
        g = self.head.backward(grad_logits[:, None])
        g = self.hidden.backward(self.hidden_relu.backward(g))
        return self.mfcc_path.backward(g)


_MODEL_CLASSES = {ModelKind.MFAAN: MfaanModel, ModelKind.BASELINE: BaselineCnn}


def build_model(kind: ModelKind, arch: ArchConfig, feature_config: FeatureConfig, seed: int):
    return _MODEL_CLASSES[ModelKind(kind)](arch, feature_config, seed)


def mfaan_forward(model: MfaanModel, mfcc: FeatureMatrix, lfcc: FeatureMatrix,
                  chroma: FeatureMatrix) -> Tuple[float, float]:
    return model.predict({FeatureKind.MFCC: mfcc, FeatureKind.LFCC: lfcc,
                          FeatureKind.CHROMA: chroma})


def path_ablation_forward(model: _Classifier, which: FeatureKind, fm: FeatureMatrix) -> np.ndarray:
    return model.embedding(which, fm)


def expected_parameter_count(arch: ArchConfig, kind: ModelKind = ModelKind.MFAAN) -> int:
    k = arch.kernel_size

    def path(rows):
        return (arch.conv1_channels * rows * k + arch.conv1_channels
                + arch.conv2_channels * arch.conv1_channels * k + arch.conv2_channels)

    if kind is ModelKind.BASELINE:
        return (path(arch.cepstral_rows) + arch.conv2_channels * arch.baseline_hidden
                + arch.baseline_hidden + arch.baseline_hidden + 1)
    return (2 * path(arch.cepstral_rows) + path(arch.chroma_rows)
            + 3 * arch.conv2_channels * arch.fusion_hidden + arch.fusion_hidden
            + arch.fusion_hidden + 1)


# ---------------------------------------------------------------------------
# checkpoints

def _tensor_table(model: _Classifier) -> Dict[str, np.ndarray]:
    table = {name: p.value for name, p in model.named_parameters().items()}
    for kind, stats in model.norm.items():
        table[f"norm.{kind.name}.mean"] = stats.mean
        table[f"norm.{kind.name}.std"] = stats.std
    return table


def checkpoint_bytes(model: _Classifier, extra: Optional[dict] = None) -> bytes:
    """Serialise a model; parameters are stored as little-endian float32."""
    config = {
        "arch": asdict(model.arch),
        "feature_config": model.feature_config.to_dict(),
        "feature_fingerprints": model.feature_fingerprints,
        "concat_order": [k.name for k in model.kinds],
        "seed": model.seed,
    }
    if extra:
        config["extra"] = extra
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IB", CHECKPOINT_VERSION, int(model.kind)))
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    table = _tensor_table(model)
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"refusing to save non-finite tensor {name}")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = buf.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(model: _Classifier, destination, extra: Optional[dict] = None) -> bytes:
    data = checkpoint_bytes(model, extra)
    Path(destination).write_bytes(data)
    return data


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"checkpoint ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_checksum(data: bytes) -> str:
    return f"{zlib.crc32(data[:-4]):08x}"


def parse_checkpoint(data: bytes, expect: Optional[ModelKind] = None):
    """Inverse of `checkpoint_bytes`. Returns (model, config dict)."""
    if len(data) < 4 or data[:4] != CHECKPOINT_MAGIC:
        raise BadMagic("not an MFAA checkpoint")
    if len(data) < 13:
        raise TruncatedFile("checkpoint header is incomplete")
    version, kind_byte = struct.unpack_from("<IB", data, 4)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    stored_crc = struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ChecksumMismatch("checkpoint CRC32 does not match its payload")
    if kind_byte not in tuple(ModelKind):
        raise UnsupportedVersion(f"unknown model kind byte {kind_byte}")
    kind = ModelKind(kind_byte)
    if expect is not None and kind is not expect:
        raise KindMismatch(f"checkpoint holds a {kind.name} model, expected {ModelKind(expect).name}")

    r = _Reader(data[:-4])
    r.pos = 9
    (blob_len,) = r.unpack("<I")
    config = json.loads(r.take(blob_len).decode())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.data):
        raise TruncatedFile("unexpected trailing bytes before checksum")

    arch = ArchConfig(**config["arch"])
    fcfg = FeatureConfig.from_dict(config["feature_config"])
    model = _MODEL_CLASSES[kind](arch, fcfg, config["seed"], init=False)
    if [k.name for k in model.kinds] != config["concat_order"]:
        raise KindMismatch("stored concatenation order does not match the model kind")
    params = model.named_parameters()
    for name, p in params.items():
        if name not in tensors:
            raise TruncatedFile(f"checkpoint lacks tensor {name}")
        if tensors[name].shape != p.value.shape:
            raise KindMismatch(f"tensor {name} has shape {tensors[name].shape}, expected {p.value.shape}")
        p.value = tensors[name].copy()
        p.grad = np.zeros_like(p.value)
    stats = {}
    for kind_ in model.kinds:
        mean = tensors.get(f"norm.{kind_.name}.mean")
        std = tensors.get(f"norm.{kind_.name}.std")
        if mean is not None and std is not None:
            stats[kind_] = FeatureStats(mean.astype(np.float64), std.astype(np.float64))
    if stats:
        model.set_normalization(stats)
    if config["feature_fingerprints"] != model.feature_fingerprints:
        raise FingerprintMismatch(config["feature_fingerprints"], model.feature_fingerprints,
                                  "stored feature")
    return model, config


def load_checkpoint(source, expect: Optional[ModelKind] = None):
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    return parse_checkpoint(bytes(data), expect)[0]
