"""Manifests, deterministic splits, clip-length normalisation, the synthetic
corpus generator, the on-disk feature cache and mini-batching."""

from __future__ import annotations

import csv
import enum
import io
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .audio_io import CANONICAL_RATE, AudioClip, encode_wav, read_wav, resample_linear
from .errors import (BadHeader, BadLabel, BadMagic, CacheMiss, DegenerateSplit, DuplicateId,
                     EmptyDataset, FingerprintMismatch, MfaanError, TruncatedFile,
                     UnsupportedVersion)
from .features import FeatureConfig, FeatureKind, FeatureMatrix, extract

log = logging.getLogger(__name__)

MANIFEST_HEADER = ["clip_id", "path", "label"]
DEFAULT_TARGET_LEN = 4 * CANONICAL_RATE
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)


class Label(enum.IntEnum):
    BONA_FIDE = 0
    SPOOF = 1

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return {"bona_fide": cls.BONA_FIDE, "spoof": cls.SPOOF}[text]
        except KeyError:
            raise BadLabel(f"label {text!r} is not one of 'bona_fide', 'spoof'") from None

    @property
    def text(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    path: str
    label: Label
    row: int = 0  # 1-based data row in the source manifest


def load_manifest(text: str) -> List[ManifestEntry]:
    """Parse `clip_id,path,label` CSV text; rows keep file order."""
    reader = csv.reader(io.StringIO(text, newline=""))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
        raise BadHeader(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {header!r}")
    entries, seen = [], set()
    for row_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise BadHeader(f"row {row_no}: expected 3 fields, got {len(row)}")
        clip_id, path, label = (c.strip() for c in row)
        try:
            parsed = Label.parse(label)
        except BadLabel as e:
            raise BadLabel(f"row {row_no}: {e}") from None
        if clip_id in seen:
            raise DuplicateId(f"row {row_no}: duplicate clip_id {clip_id!r}")
        seen.add(clip_id)
        entries.append(ManifestEntry(clip_id, path, parsed, row_no))
    return entries


def read_manifest(path) -> List[ManifestEntry]:
    return load_manifest(Path(path).read_text(encoding="utf-8"))


def dump_manifest(entries: Sequence[ManifestEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for e in entries:
        w.writerow([e.clip_id, e.path, e.label.text])
    return buf.getvalue()


def resolve(entry: ManifestEntry, base_dir) -> Path:
    p = Path(entry.path)
    return p if p.is_absolute() else Path(base_dir) / p


# ---------------------------------------------------------------------------
# splitting

@dataclass(frozen=True)
class DatasetSplit:
    train: List[ManifestEntry]
    val: List[ManifestEntry]
    test: List[ManifestEntry]
    seed: int
    fractions: Tuple[float, float, float]

    def parts(self) -> Dict[str, List[ManifestEntry]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _part_sizes(cut) -> Dict[str, int]:
    shuffled, n_train, n_val = cut
    return {"train": n_train, "val": n_val, "test": len(shuffled) - n_train - n_val}


def split_dataset(entries: Sequence[ManifestEntry], seed: int,
                  fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS) -> DatasetSplit:
    """Stratified, seeded train/val/test split.

    Within each label, entries are ordered by clip_id, shuffled with the seeded
    generator, and cut into val/test counts of round(fraction * n); train takes
    the rest. The result depends only on the clip ids, labels, seed and fractions.
    """
    if not entries:
        raise EmptyDataset("cannot split an empty manifest")
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three positive numbers summing to 1")
    rng = np.random.default_rng(seed)
    cut = {}
    for label in Label:
        group = sorted((e for e in entries if e.label is label), key=lambda e: e.clip_id)
        shuffled = [group[i] for i in rng.permutation(len(group))]
        n = len(shuffled)
        n_val = _round_half_up(fractions[1] * n)
        n_test = _round_half_up(fractions[2] * n)
        cut[label] = [shuffled, n - n_val - n_test, n_val]
    # Small classes can round val/test to zero. Fill each empty part with one
    # entry taken from the end of a class's train share (val from bona fide,
    # test from spoof) as long as that class keeps a train entry.
    for part, label in (("val", Label.BONA_FIDE), ("test", Label.SPOOF)):
        counts = {lab: _part_sizes(c) for lab, c in cut.items()}
        if sum(c[part] for c in counts.values()) == 0:
            for donor in (label, Label(1 - label)):
                shuffled, n_train, n_val = cut[donor]
                if n_train >= 2:
                    cut[donor] = [shuffled, n_train - 1, n_val + (part == "val")]
                    if part == "test":
                        # the freed slot sits between train and val; rotate it to the end
                        moved = shuffled[n_train - 1]
                        cut[donor][0] = (shuffled[:n_train - 1] + shuffled[n_train:] + [moved])
                    break
    parts = {"train": [], "val": [], "test": []}
    for label in Label:
        shuffled, n_train, n_val = cut[label]
        parts["train"] += shuffled[:n_train]
        parts["val"] += shuffled[n_train:n_train + n_val]
        parts["test"] += shuffled[n_train + n_val:]
    empty = [name for name, items in parts.items() if not items]
    if empty:
        raise DegenerateSplit(f"split(s) {', '.join(empty)} would be empty for {len(entries)} entries")
    return DatasetSplit(parts["train"], parts["val"], parts["test"], seed, tuple(fractions))


# ---------------------------------------------------------------------------
# clip preparation

def crop_or_pad(clip: AudioClip, target_len: int = DEFAULT_TARGET_LEN) -> AudioClip:
    """Center-crop or symmetrically zero-pad (extra sample on the right) to target_len."""
    n = len(clip)
    if n == 0:
        raise ValueError("cannot crop or pad an empty clip")
    if n == target_len:
        return clip
    if n > target_len:
        start = (n - target_len) // 2
        return AudioClip(clip.samples[start:start + target_len], clip.sample_rate)
    left = (target_len - n) // 2
    right = target_len - n - left
    return AudioClip(np.pad(clip.samples, (left, right)), clip.sample_rate)


def prepare_clip(clip: AudioClip, target_len: Optional[int] = DEFAULT_TARGET_LEN,
                 sample_rate: int = CANONICAL_RATE) -> AudioClip:
    clip = resample_linear(clip, sample_rate)
    return clip if target_len is None else crop_or_pad(clip, target_len)


# ---------------------------------------------------------------------------
# synthetic corpus

SYNTH_RATE = CANONICAL_RATE
SEGMENT_SEC = 0.5
PITCH_OFFSET = 0.06
NOISE_LEVEL = 0.001
ARTIFACT_LEVEL = 0.004


def _synth_clip(rng: np.random.Generator, spoof: bool) -> np.ndarray:
    """Three harmonics under a slow envelope plus low noise.

    Spoofed clips redraw the pitch (within +-6%) and the harmonic phases at
    every 0.5 s boundary, producing phase discontinuities, and carry a faint
    steady tone between 5 and 7 kHz like a vocoder's aliasing residue.
    """
    duration = rng.uniform(3.5, 4.5)
    n = int(duration * SYNTH_RATE)
    t = np.arange(n) / SYNTH_RATE
    f0 = rng.uniform(110.0, 260.0)
    amps = np.array([1.0, rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.4)])
    phases = rng.uniform(0, 2 * np.pi, size=3)
    env_rate = rng.uniform(0.2, 1.0)
    env_phase = rng.uniform(0, 2 * np.pi)

    x = np.zeros(n)
    seg = int(SEGMENT_SEC * SYNTH_RATE)
    if spoof:
        for start in range(0, n, seg):
            sl = slice(start, min(start + seg, n))
            f = f0 * (1.0 + rng.uniform(-PITCH_OFFSET, PITCH_OFFSET))
            ph = rng.uniform(0, 2 * np.pi, size=3)
            for h in range(3):
                x[sl] += amps[h] * np.sin(2 * np.pi * (h + 1) * f * t[sl] + ph[h])
    else:
        for h in range(3):
            x += amps[h] * np.sin(2 * np.pi * (h + 1) * f0 * t + phases[h])

    envelope = 0.7 + 0.3 * np.sin(2 * np.pi * env_rate * t + env_phase)
    x *= envelope
    x *= rng.uniform(0.3, 0.6) / np.max(np.abs(x))
    if spoof:
        x += ARTIFACT_LEVEL * np.sin(2 * np.pi * rng.uniform(5000.0, 7000.0) * t)
    x += rng.normal(0.0, NOISE_LEVEL, size=n)
    return np.clip(x, -1.0, 1.0 - 1.0 / 32768)


def gen_synthetic_dataset(n_per_class: int, seed: int, out_dir) -> Path:
    """Write n_per_class bona-fide and spoof WAVs plus manifest.csv; return the manifest path."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    try:
        wav_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise MfaanError(f"cannot create {wav_dir}: {e}") from e
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_per_class):
        for label in Label:
            clip_id = f"{label.text}_{i:05d}"
            rel = f"wav/{clip_id}.wav"
            samples = _synth_clip(rng, spoof=label is Label.SPOOF)
            try:
                (out_dir / rel).write_bytes(encode_wav(samples, SYNTH_RATE))
            except OSError as e:
                raise MfaanError(f"cannot write {out_dir / rel}: {e}") from e
            entries.append(ManifestEntry(clip_id, rel, label, len(entries) + 1))
    manifest = out_dir / "manifest.csv"
    manifest.write_text(dump_manifest(entries), encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# feature extraction over a manifest

ClipFeatures = Dict[FeatureKind, FeatureMatrix]


def default_threads() -> int:
    env = os.environ.get("MFAAN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise MfaanError(f"MFAAN_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def extract_entries(entries: Sequence[ManifestEntry], base_dir, cfg: FeatureConfig,
                    kinds=tuple(FeatureKind), target_len: Optional[int] = DEFAULT_TARGET_LEN,
                    threads: Optional[int] = None,
                    progress: Optional[Callable[[int, ManifestEntry], None]] = None
                    ) -> Dict[str, ClipFeatures]:
    """Extract features for every entry; results come back in manifest order.

    Stops at the first failing entry (in manifest order) with an error that
    names its row.
    """
    def work(entry):
        try:
            clip = prepare_clip(read_wav(resolve(entry, base_dir)), target_len)
            return extract(clip, cfg, kinds)
        except (OSError, MfaanError) as e:
            raise MfaanError(f"row {entry.row} ({entry.clip_id}, {entry.path}): {e}") from e

    threads = default_threads() if threads is None else threads
    out: Dict[str, ClipFeatures] = {}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for i, (entry, feats) in enumerate(zip(entries, pool.map(work, entries))):
            out[entry.clip_id] = feats
            if progress is not None:
                progress(i, entry)
    return out


# ---------------------------------------------------------------------------
# feature cache file

CACHE_MAGIC = b"MFFC"
CACHE_VERSION = 1


def cache_bytes(features: Dict[str, ClipFeatures], cfg: FeatureConfig) -> bytes:
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<I", CACHE_VERSION))
    fp = cfg.combined_fingerprint().encode()
    buf.write(struct.pack("<H", len(fp)))
    buf.write(fp)
    count = sum(len(v) for v in features.values())
    buf.write(struct.pack("<I", count))
    for clip_id, per_kind in features.items():
        raw_id = clip_id.encode()
        for kind in sorted(per_kind):
            data = per_kind[kind].data
            buf.write(struct.pack("<H", len(raw_id)))
            buf.write(raw_id)
            buf.write(struct.pack("<BII", int(kind), *data.shape))
            buf.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return buf.getvalue()


def write_cache(path, features: Dict[str, ClipFeatures], cfg: FeatureConfig) -> None:
    Path(path).write_bytes(cache_bytes(features, cfg))


def cache_fingerprint(data: bytes) -> str:
    if data[:4] != CACHE_MAGIC:
        raise BadMagic("not an MFFC feature cache")
    if len(data) < 10:
        raise TruncatedFile("feature cache header is incomplete")
    (version, fp_len) = struct.unpack_from("<IH", data, 4)
    if version != CACHE_VERSION:
        raise UnsupportedVersion(f"feature cache version {version}, expected {CACHE_VERSION}")
    if len(data) < 10 + fp_len:
        raise TruncatedFile("feature cache header is incomplete")
    return data[10:10 + fp_len].decode()


def parse_cache(data: bytes, cfg: FeatureConfig) -> Dict[str, ClipFeatures]:
    """Read a cache, rejecting it unless it was written under `cfg`."""
    found = cache_fingerprint(data)
    expected = cfg.combined_fingerprint()
    if found != expected:
        raise FingerprintMismatch(expected, found, "feature cache")
    fps = cfg.fingerprints()
    pos = 10 + len(found)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFile("feature cache ends mid-entry")
        out = data[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    out: Dict[str, ClipFeatures] = {}
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2))
        clip_id = take(id_len).decode()
        kind_byte, rows, cols = struct.unpack("<BII", take(9))
        kind = FeatureKind(kind_byte)
        arr = np.frombuffer(take(4 * rows * cols), dtype="<f4").reshape(rows, cols)
        out.setdefault(clip_id, {})[kind] = FeatureMatrix(kind, arr.astype(np.float32),
                                                          fps[kind.name])
    return out


def read_cache(path, cfg: FeatureConfig) -> Dict[str, ClipFeatures]:
    return parse_cache(Path(path).read_bytes(), cfg)


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    clip_ids: List[str]
    features: Dict[FeatureKind, np.ndarray]  # [B, rows, T]
    labels: np.ndarray


def epoch_seed(seed: int, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch])


def make_batches(entries: Sequence[ManifestEntry], features: Dict[str, ClipFeatures],
                 batch_size: int = 32, seed: int = 0, epoch: Optional[int] = 0,
                 kinds=tuple(FeatureKind), dtype=np.float32) -> List[Batch]:
    """Shuffle (unless epoch is None) and chunk entries; the last batch may be short."""
    missing = [e.clip_id for e in entries if e.clip_id not in features
               or any(k not in features[e.clip_id] for k in kinds)]
    if missing:
        raise CacheMiss(f"no cached features for {len(missing)} clip(s), e.g. {missing[0]!r}")
    order = np.arange(len(entries))
    if epoch is not None:
        order = np.random.default_rng(epoch_seed(seed, epoch)).permutation(len(entries))
    batches = []
    for start in range(0, len(order), batch_size):
        chosen = [entries[i] for i in order[start:start + batch_size]]
        stacked = {k: np.stack([features[e.clip_id][k].data for e in chosen]).astype(dtype)
                   for k in kinds}
        labels = np.array([int(e.label) for e in chosen], dtype=dtype)
        batches.append(Batch([e.clip_id for e in chosen], stacked, labels))
    return batches
