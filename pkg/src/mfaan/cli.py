"""Command-line entry point: ``mfaan <subcommand> ...``.

Results go to stdout as ``key=value`` lines; progress and diagnostics go to
stderr. Exit status is 0 on success, 1 on usage or data errors and 2 when
training diverges.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .audio_io import read_wav
from .data import (DEFAULT_TARGET_LEN, dump_manifest, extract_entries, gen_synthetic_dataset,
                   prepare_clip, read_cache, read_manifest, split_dataset, write_cache,
                   cache_fingerprint)
from .errors import FingerprintMismatch, MfaanError, TrainingDiverged
from .features import FeatureConfig, FeatureKind, extract
from .metrics import evaluate_model
from .model import ModelKind, checkpoint_checksum, parse_checkpoint, save_checkpoint
from .train import TrainConfig, train

log = logging.getLogger("mfaan")

_STFT_KEYS = {"frame_len", "hop", "fft_size", "pre_emphasis"}
_FEATURE_KEYS = {"n_filters", "n_coeffs", "f_min", "f_max", "log_floor"}


class UsageError(MfaanError):
    pass


@dataclass
class RunConfig:
    seed: int = 42
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    arch: str = "mfaan"
    target_len: int = DEFAULT_TARGET_LEN
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def validate(self):
        for name in ("epochs", "batch_size", "lr", "target_len"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        if self.seed < 0:
            raise UsageError("seed must be non-negative")
        if self.arch not in ("mfaan", "baseline"):
            raise UsageError(f"arch must be 'mfaan' or 'baseline', got {self.arch!r}")
        return self

    @property
    def model_kind(self) -> ModelKind:
        return ModelKind.MFAAN if self.arch == "mfaan" else ModelKind.BASELINE

    def merge(self, overrides: dict) -> "RunConfig":
        """Apply a flat mapping of overrides; unknown keys are rejected."""
        plain = {f.name for f in dataclasses.fields(self)} - {"features"}
        unknown = set(overrides) - plain - _STFT_KEYS - _FEATURE_KEYS
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        top = {k: v for k, v in overrides.items() if k in plain}
        stft = {k: v for k, v in overrides.items() if k in _STFT_KEYS}
        feat = {k: v for k, v in overrides.items() if k in _FEATURE_KEYS}
        try:
            features = dataclasses.replace(
                self.features, stft=dataclasses.replace(self.features.stft, **stft), **feat)
        except ValueError as e:
            raise UsageError(f"invalid feature config: {e}") from e
        return dataclasses.replace(self, features=features, **top)


def load_run_config(path: Optional[str], flags: dict) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = cfg.merge(data)
    return cfg.merge({k: v for k, v in flags.items() if v is not None}).validate()


def _kinds(choice: str):
    if choice == "all":
        return tuple(FeatureKind)
    return (FeatureKind[choice.upper()],)


def _progress(total):
    def report(i, entry):
        print(f"[{i + 1}/{total}] {entry.clip_id}", file=sys.stderr)
    return report


def _load_features(entries, base_dir, fcfg, kinds, target_len, cache: Optional[str]):
    """Features from an up-to-date cache when possible, else extracted (and cached)."""
    if cache and Path(cache).exists():
        feats = read_cache(cache, fcfg)
        if all(e.clip_id in feats and all(k in feats[e.clip_id] for k in kinds) for e in entries):
            return feats
        log.info("cache %s is incomplete; re-extracting", cache)
    feats = extract_entries(entries, base_dir, fcfg, kinds, target_len,
                            progress=_progress(len(entries)))
    if cache:
        write_cache(cache, feats, fcfg)
    return feats


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_synth(args) -> int:
    manifest = gen_synthetic_dataset(args.n, args.seed, args.out)
    print(manifest)
    return 0


def cmd_extract(args) -> int:
    cfg = load_run_config(args.config, {})
    kinds = _kinds(args.feature)
    entries = read_manifest(args.manifest)
    out = Path(args.out)
    fp = cfg.features.combined_fingerprint()
    if out.exists():
        try:
            if cache_fingerprint(out.read_bytes()) == fp:
                feats = read_cache(out, cfg.features)
                if all(e.clip_id in feats and all(k in feats[e.clip_id] for k in kinds)
                       for e in entries):
                    n = sum(len(v) for v in feats.values())
                    print(f"status=up_to_date entries={len(entries)} matrices={n} "
                          f"fingerprint={fp} cache={out}")
                    return 0
        except MfaanError:
            pass  # unreadable or stale caches are simply rebuilt
    feats = extract_entries(entries, Path(args.manifest).parent, cfg.features, kinds,
                            cfg.target_len, progress=_progress(len(entries)))
    write_cache(out, feats, cfg.features)
    n = sum(len(v) for v in feats.values())
    print(f"status=written entries={len(entries)} matrices={n} fingerprint={fp} cache={out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed, "arch": args.arch,
                                        "epochs": args.epochs})
    manifest = Path(args.manifest)
    entries = read_manifest(manifest)
    split = split_dataset(entries, cfg.seed)
    kinds = (FeatureKind.MFCC,) if cfg.model_kind is ModelKind.BASELINE else tuple(FeatureKind)
    feats = _load_features(entries, manifest.parent, cfg.features, kinds, cfg.target_len,
                           args.cache)

    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log")
    lines = ["epoch\ttrain_loss\tval_accuracy"]

    def on_epoch(e):
        lines.append(e.line())
        print(f"epoch {e.epoch}: loss={e.train_loss:.4f} val_acc={e.val_accuracy:.4f}",
              file=sys.stderr)

    tcfg = TrainConfig(cfg.seed, cfg.epochs, cfg.batch_size, cfg.lr, cfg.model_kind, cfg.features)
    try:
        result = train(tcfg, split, feats, on_epoch)
    finally:
        log_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    base = manifest.parent.resolve()
    for name, part in split.parts().items():
        absolute = [dataclasses.replace(e, path=str(base / e.path)) if not Path(e.path).is_absolute()
                    else e for e in part]
        out.with_name(f"{out.name}.{name}.csv").write_text(dump_manifest(absolute), encoding="utf-8")
    extra = {"target_len": cfg.target_len, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
             "lr": cfg.lr, "best_epoch": result.best_epoch,
             "split_sizes": {k: len(v) for k, v in split.parts().items()}}
    data = save_checkpoint(result.model, out, extra)
    best = result.history[result.best_epoch]
    print(f"model={out} kind={cfg.arch} best_epoch={result.best_epoch} "
          f"val_accuracy={best.val_accuracy:.6f} checksum={checkpoint_checksum(data)} "
          f"test_manifest={out.with_name(out.name + '.test.csv')}")
    return 0


def _load_model(path):
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise UsageError(f"cannot read model {path}: {e}") from e
    model, config = parse_checkpoint(data)
    return model, config, checkpoint_checksum(data)


def cmd_eval(args) -> int:
    model, config, checksum = _load_model(args.model)
    target_len = config.get("extra", {}).get("target_len", DEFAULT_TARGET_LEN)
    fcfg = model.feature_config
    if args.config:
        fcfg = load_run_config(args.config, {}).features
        found = {k.name: fcfg.fingerprints()[k.name] for k in model.kinds}
        if found != model.feature_fingerprints:
            raise FingerprintMismatch(model.feature_fingerprints, found, "feature config")
    manifest = Path(args.manifest)
    entries = read_manifest(manifest)
    if args.cache:
        feats = read_cache(args.cache, fcfg)
        if fcfg != model.feature_config:
            raise FingerprintMismatch(model.feature_config.combined_fingerprint(),
                                      fcfg.combined_fingerprint(), "feature cache")
    else:
        feats = extract_entries(entries, manifest.parent, fcfg, model.kinds, target_len,
                                progress=_progress(len(entries)))
    report = evaluate_model(model, entries, feats, model_checksum=checksum)
    Path(args.report).write_text(report.to_json(), encoding="utf-8")
    print(f"accuracy={report.accuracy:.6f} eer={report.eer:.6f}")
    return 0


def cmd_infer(args) -> int:
    model, config, _ = _load_model(args.model)
    target_len = config.get("extra", {}).get("target_len", DEFAULT_TARGET_LEN)
    clip = prepare_clip(read_wav(args.wav), target_len)
    feats = extract(clip, model.feature_config, model.kinds)
    _, p = model.predict(feats)
    verdict = "spoof" if p >= 0.5 else "bona_fide"
    print(f"spoof_probability={p:.6e} verdict={verdict}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfaan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a seeded synthetic bona-fide/spoof corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="clips per class")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("extract", help="extract features for a manifest into a cache file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--feature", choices=["mfcc", "lfcc", "chroma", "all"], default="all")
    p.add_argument("--config")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="split, extract and train; writes a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=["mfaan", "baseline"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--cache", help="feature cache to reuse or create")
    p.add_argument("--log", help="training log path (default: <out>.log)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a manifest and write a JSON report")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--config", help="feature overrides; must match the model's")
    p.add_argument("--cache")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="classify one WAV file")
    p.add_argument("--model", required=True)
    p.add_argument("--wav", required=True)
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 2
    except (MfaanError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
