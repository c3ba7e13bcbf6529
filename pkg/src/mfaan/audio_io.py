"""WAV decoding/encoding, resampling and framing.

Only RIFF/WAVE 16-bit integer PCM is handled. Decoded audio is folded to
mono by channel averaging and scaled by 1/32768 so every sample lies in
[-1, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ClipTooShort, EmptyAudio, MalformedContainer, UnsupportedEncoding

CANONICAL_RATE = 16000

_PCM = 1
_EXTENSIBLE = 0xFFFE
# KSDATAFORMAT_SUBTYPE_PCM GUID, as stored in WAVE_FORMAT_EXTENSIBLE
_PCM_SUBFORMAT = b"\x01\x00\x00\x00\x00\x00\x10\x00\x80\x00\x00\xaa\x00\x38\x9b\x71"


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = pos + 8
        if body + size > len(data):
            raise MalformedContainer(
                f"chunk {cid!r} claims {size} bytes but only {len(data) - body} remain"
            )
        yield cid, data[body:body + size]
        pos = body + size + (size & 1)


def load_wav(data: bytes) -> AudioClip:
    """Decode a 16-bit PCM RIFF/WAVE byte string into a mono clip."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedContainer("missing RIFF/WAVE magic")
    riff_size = struct.unpack_from("<I", data, 4)[0]
    if riff_size + 8 > len(data):
        raise MalformedContainer(
            f"RIFF size {riff_size} exceeds file length {len(data)}"
        )
    data = data[:riff_size + 8]

    fmt = None
    pcm = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data" and pcm is None:
            pcm = body
    if fmt is None or len(fmt) < 16:
        raise MalformedContainer("missing or short 'fmt ' chunk")
    if pcm is None:
        raise MalformedContainer("missing 'data' chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == _EXTENSIBLE and len(fmt) >= 40 and fmt[24:40] == _PCM_SUBFORMAT:
        tag = _PCM
    if tag != _PCM:
        raise UnsupportedEncoding(f"audio format tag {tag:#06x} is not integer PCM")
    if bits != 16:
        raise UnsupportedEncoding(f"{bits}-bit PCM is not supported (16-bit only)")
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{channels} channels not supported")
    if rate == 0 or block_align != 2 * channels:
        raise MalformedContainer("inconsistent fmt chunk")

    n_frames = len(pcm) // block_align
    if n_frames == 0:
        raise EmptyAudio("data chunk holds no sample frames")
    ints = np.frombuffer(pcm, dtype="<i2", count=n_frames * channels)
    x = ints.reshape(n_frames, channels).astype(np.float64).mean(axis=1) / 32768.0
    return AudioClip(x, rate)


def read_wav(path) -> AudioClip:
    return load_wav(Path(path).read_bytes())


def encode_wav(samples, sample_rate: int) -> bytes:
    """Encode samples (shape [n] or [n, channels], values in [-1, 1]) as 16-bit PCM."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{channels} channels not supported")
    q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    fmt = struct.pack("<HHIIHH", _PCM, channels, sample_rate,
                      sample_rate * 2 * channels, 2 * channels, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, clip: AudioClip) -> None:
    Path(path).write_bytes(encode_wav(clip.samples, clip.sample_rate))


def resample_linear(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear-interpolation resampler.

    Output sample i is read at source position i * source_rate / target_rate;
    output length is floor(n * target_rate / source_rate).
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return clip
    n = len(clip)
    n_out = (n * target_rate) // clip.sample_rate
    pos = np.arange(n_out, dtype=np.float64) * (clip.sample_rate / target_rate)
    out = np.interp(pos, np.arange(n, dtype=np.float64), clip.samples)
    return AudioClip(out, target_rate)


def frame_signal(clip_or_samples, frame_len: int, hop: int) -> np.ndarray:
    """Slice into overlapping frames, dropping the trailing remainder.

    Returns an array of shape [n_frames, frame_len] where
    n_frames = (len - frame_len) // hop + 1.
    """
    x = clip_or_samples.samples if isinstance(clip_or_samples, AudioClip) else np.asarray(clip_or_samples)
    if frame_len <= 0 or hop <= 0:
        raise ValueError("frame_len and hop must be positive")
    if len(x) < frame_len:
        raise ClipTooShort(f"{len(x)} samples is shorter than one {frame_len}-sample frame")
    n_frames = (len(x) - frame_len) // hop + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, frame_len)
    return windows[::hop][:n_frames]
