"""MFCC, LFCC and chroma extraction on top of a shared short-time power spectrum.

MFCC and LFCC run the same pipeline (filterbank, log, orthonormal DCT-II) and
differ only in how the filter edges are spaced: mel-warped vs. linear.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .audio_io import CANONICAL_RATE, AudioClip, frame_signal
from .errors import DegenerateFilter, RateMismatch, ShapeMismatch

STD_FLOOR = 1e-8


class FeatureKind(enum.IntEnum):
    MFCC = 1
    LFCC = 2
    CHROMA = 3


class Scale(str, enum.Enum):
    MEL = "mel"
    LINEAR = "linear"


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 400
    hop: int = 160
    fft_size: int = 512
    window: str = "hann"
    pre_emphasis: float = 0.97
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        if self.frame_len <= 0 or self.hop <= 0:
            raise ValueError("frame_len and hop must be positive")
        if self.fft_size < self.frame_len or self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a power of two and >= frame_len")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if not 0.0 <= self.pre_emphasis < 1.0:
            raise ValueError("pre_emphasis must lie in [0, 1)")


@dataclass(frozen=True)
class CepstralConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    n_filters: int = 40
    n_coeffs: int = 40
    f_min: float = 0.0
    f_max: Optional[float] = None  # None means Nyquist
    scale: Scale = Scale.MEL
    log_floor: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "scale", Scale(self.scale))
        if self.n_coeffs <= 0 or self.n_filters <= 0 or self.n_coeffs > self.n_filters:
            raise ValueError("need 0 < n_coeffs <= n_filters")
        nyquist = self.stft.sample_rate / 2
        if not 0.0 <= self.f_min < self.upper_hz <= nyquist:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate / 2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def upper_hz(self) -> float:
        return self.stft.sample_rate / 2 if self.f_max is None else float(self.f_max)


@dataclass(frozen=True)
class ChromaConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    tuning: float = 440.0
    norm: str = "max"


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    kind: FeatureKind
    data: np.ndarray
    config_fingerprint: str

    @property
    def shape(self):
        return self.data.shape


def _canonical(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _canonical(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value if not isinstance(obj, enum.IntEnum) else obj.name
    return obj


def fingerprint(kind: FeatureKind, cfg) -> str:
    """Stable short hash of an extraction config (plus the feature kind)."""
    payload = json.dumps({"kind": kind.name, "config": _canonical(cfg)},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# spectral front end

def hann_window(n: int) -> np.ndarray:
    # symmetric form: 0.5 - 0.5 cos(2 pi k / (n - 1))
    return np.hanning(n)


def power_spectrogram(clip: AudioClip, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """|DFT|^2 of pre-emphasised, Hann-windowed frames: [fft_size/2 + 1, n_frames]."""
    if clip.sample_rate != cfg.sample_rate:
        raise RateMismatch(f"clip is {clip.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    frames = frame_signal(clip, cfg.frame_len, cfg.hop)
    emph = frames.copy()
    # per-frame pre-emphasis; the first sample of each frame passes through
    emph[:, 1:] -= cfg.pre_emphasis * frames[:, :-1]
    spec = np.fft.rfft(emph * hann_window(cfg.frame_len), n=cfg.fft_size, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def filter_edges(cfg: CepstralConfig) -> np.ndarray:
    """n_filters + 2 edge frequencies in Hz, uniform on the configured scale."""
    if cfg.scale is Scale.MEL:
        pts = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.upper_hz), cfg.n_filters + 2)
        edges = mel_to_hz(pts)
        edges[0], edges[-1] = cfg.f_min, cfg.upper_hz
        return edges
    return np.linspace(cfg.f_min, cfg.upper_hz, cfg.n_filters + 2)


def triangular_filterbank(cfg: CepstralConfig, sample_rate: int, fft_size: int) -> np.ndarray:
    """Triangular filters sampled at the rfft bin frequencies: [n_filters, fft_size/2 + 1]."""
    edges = filter_edges(cfg)
    edge_bins = np.floor(edges * fft_size / sample_rate + 0.5).astype(int)
    same = np.nonzero(np.diff(edge_bins) == 0)[0]
    if same.size:
        i = int(same[0])
        raise DegenerateFilter(
            f"edges {i} and {i + 1} ({edges[i]:.1f} Hz, {edges[i + 1]:.1f} Hz) "
            f"fall into the same FFT bin; use fewer filters or a larger fft_size"
        )
    freqs = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def dct_matrix(n: int, n_out: Optional[int] = None) -> np.ndarray:
    """Rows of the orthonormal DCT-II basis, truncated to n_out."""
    n_out = n if n_out is None else n_out
    k = np.arange(n_out)[:, None]
    t = np.arange(n)[None, :]
    d = np.cos(np.pi * k * (t + 0.5) / n)
    d *= np.sqrt(2.0 / n)
    d[0] = np.sqrt(1.0 / n)
    return d


def dct2_orthonormal(x, n_out: Optional[int] = None) -> np.ndarray:
    """Orthonormal DCT-II along the first axis, keeping the first n_out coefficients."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    n_out = n if n_out is None else n_out
    if n_out > n:
        raise ValueError("n_out cannot exceed the input length")
    return dct_matrix(n, n_out) @ x


def cepstral(clip: AudioClip, cfg: CepstralConfig, kind: FeatureKind) -> FeatureMatrix:
    power = power_spectrogram(clip, cfg.stft)
    fb = triangular_filterbank(cfg, cfg.stft.sample_rate, cfg.stft.fft_size)
    energies = np.log(np.maximum(fb @ power, cfg.log_floor))
    coeffs = dct2_orthonormal(energies, cfg.n_coeffs)
    return FeatureMatrix(kind, coeffs, fingerprint(kind, cfg))


def mfcc(clip: AudioClip, cfg: Optional[CepstralConfig] = None) -> FeatureMatrix:
    cfg = CepstralConfig() if cfg is None else cfg
    if cfg.scale is not Scale.MEL:
        raise ValueError("mfcc requires a MEL-scale config")
    return cepstral(clip, cfg, FeatureKind.MFCC)


def lfcc(clip: AudioClip, cfg: Optional[CepstralConfig] = None) -> FeatureMatrix:
    cfg = CepstralConfig(scale=Scale.LINEAR) if cfg is None else cfg
    if cfg.scale is not Scale.LINEAR:
        raise ValueError("lfcc requires a LINEAR-scale config")
    return cepstral(clip, cfg, FeatureKind.LFCC)


def pitch_classes(cfg: StftConfig, tuning: float = 440.0) -> np.ndarray:
    """Pitch class (0 = A) of every rfft bin; bin 0 (DC) maps to -1."""
    freqs = np.arange(1, cfg.fft_size // 2 + 1) * (cfg.sample_rate / cfg.fft_size)
    semis = np.floor(12.0 * np.log2(freqs / tuning) + 0.5).astype(int)
    return np.concatenate([[-1], np.mod(semis, 12)])


def chroma_stft(clip: AudioClip, cfg: Optional[ChromaConfig] = None) -> FeatureMatrix:
    """Fold bin energies into 12 pitch classes, then scale each frame by its maximum."""
    cfg = ChromaConfig() if cfg is None else cfg
    if cfg.norm != "max":
        raise ValueError(f"unsupported chroma norm {cfg.norm!r}")
    power = power_spectrogram(clip, cfg.stft)
    classes = pitch_classes(cfg.stft, cfg.tuning)
    fold = (classes[None, :] == np.arange(12)[:, None]).astype(np.float64)
    chroma = fold @ power
    peak = chroma.max(axis=0, keepdims=True)
    chroma = np.divide(chroma, peak, out=np.zeros_like(chroma), where=peak > 0)
    return FeatureMatrix(FeatureKind.CHROMA, chroma, fingerprint(FeatureKind.CHROMA, cfg))


# ---------------------------------------------------------------------------
# the three-feature bundle used by the models

@dataclass(frozen=True)
class FeatureConfig:
    """Extraction settings for all three paths, sharing one STFT front end."""

    stft: StftConfig = field(default_factory=StftConfig)
    n_filters: int = 40
    n_coeffs: int = 40
    f_min: float = 0.0
    f_max: Optional[float] = None
    log_floor: float = 1e-10
    tuning: float = 440.0

    def cepstral(self, scale: Scale) -> CepstralConfig:
        return CepstralConfig(self.stft, self.n_filters, self.n_coeffs,
                              self.f_min, self.f_max, scale, self.log_floor)

    def chroma(self) -> ChromaConfig:
        return ChromaConfig(self.stft, self.tuning)

    def fingerprints(self) -> dict:
        return {
            "MFCC": fingerprint(FeatureKind.MFCC, self.cepstral(Scale.MEL)),
            "LFCC": fingerprint(FeatureKind.LFCC, self.cepstral(Scale.LINEAR)),
            "CHROMA": fingerprint(FeatureKind.CHROMA, self.chroma()),
        }

    def combined_fingerprint(self) -> str:
        fps = self.fingerprints()
        joined = ",".join(f"{k}={fps[k]}" for k in sorted(fps))
        return hashlib.sha256(joined.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return _canonical(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        d = dict(d)
        stft = StftConfig(**d.pop("stft", {}))
        return cls(stft=stft, **d)


def extract(clip: AudioClip, cfg: FeatureConfig, kinds=tuple(FeatureKind)) -> dict:
    """Return {FeatureKind: FeatureMatrix} for the requested kinds."""
    out = {}
    for kind in kinds:
        if kind is FeatureKind.MFCC:
            out[kind] = mfcc(clip, cfg.cepstral(Scale.MEL))
        elif kind is FeatureKind.LFCC:
            out[kind] = lfcc(clip, cfg.cepstral(Scale.LINEAR))
        else:
            out[kind] = chroma_stft(clip, cfg.chroma())
    return out


# ---------------------------------------------------------------------------
# normalisation

@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_matrices(cls, matrices) -> "FeatureStats":
        """Per-row statistics pooled over every frame of every matrix."""
        data = [m.data if isinstance(m, FeatureMatrix) else np.asarray(m) for m in matrices]
        stacked = np.concatenate(data, axis=1).astype(np.float64)
        return cls(stacked.mean(axis=1), stacked.std(axis=1))


def normalize_per_coefficient(fm: FeatureMatrix, stats: FeatureStats) -> FeatureMatrix:
    if stats.mean.shape[0] != fm.data.shape[0] or stats.std.shape[0] != fm.data.shape[0]:
        raise ShapeMismatch(
            f"stats cover {stats.mean.shape[0]} rows, matrix has {fm.data.shape[0]}"
        )
    scale = np.maximum(stats.std, STD_FLOOR)[:, None]
    data = (fm.data - stats.mean[:, None]) / scale
    return FeatureMatrix(fm.kind, data, fm.config_fingerprint)
