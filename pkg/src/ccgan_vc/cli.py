"""Command-line pipeline: extract, stats, train, convert, evaluate, model-size.

Settings live in one flat ``key = value`` file (``--config``); ``--set
key=value`` overrides individual keys.  Exit codes: 0 success, 1 partial
data failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conversion import ConversionRequest, convert_file
from .corpus import (
    FeatureFileError,
    ManifestError,
    SpeakerRegistry,
    UtteranceRecord,
    compute_speaker_stats,
    load_manifest,
    load_stats,
    read_features,
    save_stats,
    write_features,
)
from .evaluation import evaluate_pairs
from .losses import LossWeights
from .model import (
    DiscriminatorConfig,
    GeneratorConfig,
    cyclegan_fleet_size,
    init_params,
    make_cyclegan_baseline,
    parameter_count,
)
from .training import CheckpointError, TrainConfig, load_checkpoint, run_training
from .vocoder import DEFAULT_ALPHA, SAMPLE_RATE_HZ, VocoderError, analyze_to_features, get_backend, read_wav

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2
_SECTION = "run"
_WEIGHT_KEYS = ("w_gan", "w_cycle", "w_identity")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    manifest: Path | None = None
    feature_dir: Path = Path("features")
    checkpoint_dir: Path = Path("checkpoints")
    log_dir: Path | None = None
    stats: Path | None = None
    backend: str = "toy"
    alpha: float = DEFAULT_ALPHA
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: dict = field(default_factory=dict)
    disc: dict = field(default_factory=dict)

    @property
    def stats_path(self) -> Path:
        return self.stats if self.stats is not None else self.feature_dir / "stats.json"

    def model_configs(self, n_speakers: int) -> tuple[GeneratorConfig, DiscriminatorConfig]:
        return GeneratorConfig(n_speakers, **self.gen), DiscriminatorConfig(n_speakers, **self.disc)

    def to_dict(self) -> dict:
        d = {k: (str(v) if isinstance(v, Path) else v) for k, v in dataclasses.asdict(self).items()
             if k not in ("train", "gen", "disc")}
        d["train"] = dataclasses.asdict(self.train)
        d["gen"], d["disc"] = dict(self.gen), dict(self.disc)
        return d


def _parse_value(raw: str, like, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if like is None:
            return None if raw.lower() in ("", "none") else int(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _field_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
    return out


_PATH_KEYS = ("manifest", "feature_dir", "checkpoint_dir", "log_dir", "stats")


def build_run_config(items: dict[str, str], base_dir: Path = Path(".")) -> RunConfig:
    """Flat key/value pairs -> RunConfig.  ``gen_*``/``disc_*`` keys set architecture fields."""
    train_defaults = _field_defaults(TrainConfig)
    weight_defaults = _field_defaults(LossWeights)
    gen_defaults = _field_defaults(GeneratorConfig)
    disc_defaults = _field_defaults(DiscriminatorConfig)
    top, train, weights, gen, disc = {}, {}, {}, {}, {}
    for key, raw in items.items():
        if key in _PATH_KEYS:
            v = raw.strip()
            top[key] = None if v.lower() in ("", "none") else base_dir / v
        elif key == "backend":
            top[key] = raw.strip()
        elif key == "alpha":
            top[key] = _parse_value(raw, 0.0, key)
        elif key in _WEIGHT_KEYS:
            weights[key] = _parse_value(raw, weight_defaults[key], key)
        elif key in train_defaults and key != "weights":
            train[key] = _parse_value(raw, train_defaults[key], key)
        elif key.startswith("gen_") and key[4:] in gen_defaults:
            gen[key[4:]] = _parse_value(raw, gen_defaults[key[4:]], key)
        elif key.startswith("disc_") and key[5:] in disc_defaults:
            disc[key[5:]] = _parse_value(raw, disc_defaults[key[5:]], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        tc = TrainConfig(**train, weights=LossWeights(**weights))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return RunConfig(**top, train=tc, gen=gen, disc=disc)


def load_run_config(path: str | Path | None = None, overrides=(), seed: int | None = None) -> RunConfig:
    """Read the flat config file, then apply ``key=value`` overrides and the seed.

    Paths in the file are relative to the file; override paths to the working directory.
    """
    items: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        try:
            parser.read_string(f"[{_SECTION}]\n" + path.read_text(encoding="utf-8"), source=str(path))
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        if parser.sections() != [_SECTION]:
            raise ConfigError(f"{path}: sections are not allowed in the flat config file")
        for key, value in parser[_SECTION].items():
            if key in _PATH_KEYS and value.strip().lower() not in ("", "none"):
                value = str(path.parent / value.strip())
            items[key] = value
    for ov in overrides:
        key, sep, value = ov.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {ov!r}")
        items[key.strip()] = value
    if seed is not None:
        items["seed"] = str(seed)
    return build_run_config(items)


# --------------------------------------------------------------------------
# helpers


def feature_name(registry: SpeakerRegistry, record: UtteranceRecord) -> str:
    return f"{registry.labels[record.speaker_index]}__{record.utt_id}.ccvc"


def feature_path(cfg: RunConfig, registry: SpeakerRegistry, record: UtteranceRecord) -> Path:
    src = Path(record.source)
    if src.suffix.lower() == ".ccvc":
        return src
    return cfg.feature_dir / feature_name(registry, record)


def _require_manifest(cfg: RunConfig) -> tuple[SpeakerRegistry, list[UtteranceRecord]]:
    if cfg.manifest is None:
        raise ConfigError("no manifest given (--manifest or 'manifest' config key)")
    return load_manifest(cfg.manifest)


def _load_dataset(cfg, registry, records):
    dataset = []
    for r in records:
        p = feature_path(cfg, registry, r)
        if not p.exists():
            raise FileNotFoundError(f"missing features for {registry.labels[r.speaker_index]}/{r.utt_id}: {p} (run extract)")
        dataset.append((r, read_features(p)))
    return dataset


def _stats_for(cfg, registry, dataset):
    path = cfg.stats_path
    if path.exists():
        reg, stats = load_stats(path)
        if reg.labels != registry.labels:
            raise ConfigError(f"{path}: speaker list differs from the manifest")
        return stats
    return _compute_stats(registry, dataset)


def _compute_stats(registry, dataset):
    stats = []
    for s, label in enumerate(registry.labels):
        bundles = [b for r, b in dataset if r.speaker_index == s and r.split == "train"]
        if not bundles:
            raise ManifestError(f"speaker {label} has no training utterances")
        stats.append(compute_speaker_stats(bundles))
    return stats


# --------------------------------------------------------------------------
# commands


def cmd_extract(cfg: RunConfig, force: bool = False, out=None) -> int:
    out = out or sys.stdout
    registry, records = _require_manifest(cfg)
    backend = get_backend(cfg.backend)
    cfg.feature_dir.mkdir(parents=True, exist_ok=True)
    wrote = skipped = 0
    failed = []
    for r in records:
        src = Path(r.source)
        if src.suffix.lower() == ".ccvc":
            skipped += 1
            continue
        dst = cfg.feature_dir / feature_name(registry, r)
        if not force and dst.exists() and src.exists() and dst.stat().st_mtime >= src.stat().st_mtime:
            skipped += 1
            continue
        try:
            bundle = analyze_to_features(read_wav(src, target_rate=SAMPLE_RATE_HZ), backend, cfg.alpha)
            write_features(dst, bundle)
            wrote += 1
        except (OSError, ValueError, VocoderError) as e:
            failed.append(src)
            print(f"failed: {src}: {e}", file=sys.stderr)
    print(f"extract: wrote {wrote}, skipped {skipped}, failed {len(failed)}", file=out)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_stats(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    registry, records = _require_manifest(cfg)
    dataset = _load_dataset(cfg, registry, [r for r in records if r.split == "train"])
    stats = _compute_stats(registry, dataset)
    cfg.stats_path.parent.mkdir(parents=True, exist_ok=True)
    save_stats(cfg.stats_path, registry, stats)
    for label, s in zip(registry.labels, stats):
        print(f"{label}: mu_logf0={s.mu_logf0:.4f} sigma_logf0={s.sigma_logf0:.4f}", file=out)
    print(f"stats written to {cfg.stats_path}", file=out)
    return EXIT_OK


def cmd_train(cfg: RunConfig, resume: Path | None = None, stop_after_epoch: int | None = None,
              out=None) -> int:
    out = out or sys.stdout
    registry, records = _require_manifest(cfg)
    dataset = _load_dataset(cfg, registry, [r for r in records if r.split == "train"])
    ckpt = None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.registry.labels != registry.labels:
            raise ConfigError(f"{resume}: checkpoint speakers {list(ckpt.registry.labels)} differ from the manifest")
        gen_cfg, disc_cfg, train_cfg, stats = ckpt.gen_config, ckpt.disc_config, ckpt.train_config, ckpt.stats
        print(f"resuming at epoch {ckpt.state.epoch}", file=out)
    else:
        gen_cfg, disc_cfg = cfg.model_configs(registry.n)
        train_cfg, stats = cfg.train, _stats_for(cfg, registry, dataset)

    def report(row):
        print(
            f"epoch {row['epoch']:4d} iter {row['iter']:7d}  d={row['d_loss']:.4f} adv={row['g_adv']:.4f} "
            f"cyc={row['g_cycle']:.4f} id={row['g_identity']:.4f} lr_g={row['lr_g']:.3g}",
            file=out,
        )

    result = run_training(
        train_cfg, dataset, registry, stats, gen_cfg, disc_cfg,
        out_dir=cfg.checkpoint_dir, resume=ckpt, extra={"run_config": cfg.to_dict()},
        on_epoch=report, stop_after_epoch=stop_after_epoch, log_dir=cfg.log_dir,
    )
    print(f"checkpoint: {cfg.checkpoint_dir / 'latest.ccck'} (epoch {result.checkpoint.state.epoch})", file=out)
    return EXIT_OK


def cmd_convert(cfg: RunConfig, checkpoint: Path, src: str, tgt: str, inp: Path, outp: Path,
                features_out: Path | None = None, out=None) -> int:
    out = out or sys.stdout
    request = ConversionRequest(load_checkpoint(checkpoint), src, tgt, Path(inp), Path(outp), features_out)
    request.checkpoint.registry.index(src)
    request.checkpoint.registry.index(tgt)
    if request.is_identity:
        print(f"notice: source and target are both {src}; performing identity conversion", file=out)
    convert_file(request, get_backend(cfg.backend), cfg.alpha)
    print(f"wrote {outp}", file=out)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, converted_dir: Path, reference_dir: Path, csv_path: Path,
                 segment: int = 64, out=None) -> int:
    out = out or sys.stdout
    registry, _ = _require_manifest(cfg)
    for d in (converted_dir, reference_dir):
        if not Path(d).is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    report = evaluate_pairs(converted_dir, reference_dir, registry, segment=segment)
    report.write_csv(csv_path)
    print(report.format_table(), file=out)
    print(f"report written to {csv_path}", file=out)
    return EXIT_OK


def model_size_rows(cfg: RunConfig, n_speakers: int) -> dict:
    fleet = cyclegan_fleet_size(n_speakers)
    gen_cfg, disc_cfg = cfg.model_configs(n_speakers)
    cc_g = parameter_count(init_params(gen_cfg, _rng()))
    cc_d = parameter_count(init_params(disc_cfg, _rng()))
    pair = parameter_count(make_cyclegan_baseline(gen_cfg, disc_cfg).modules())
    return {
        "n_speakers": n_speakers,
        "ccgan_generator": cc_g,
        "ccgan_discriminator": cc_d,
        "ccgan_total": cc_g + cc_d,
        "cyclegan_pair": pair,
        "fleet_pairs": fleet,
        "fleet_total": fleet * pair,
        "ratio": (cc_g + cc_d) / (fleet * pair),
    }


def _rng():
    return np.random.default_rng(0)


def cmd_model_size(cfg: RunConfig, n_speakers: int, out=None) -> int:
    out = out or sys.stdout
    if n_speakers < 2:
        raise ConfigError("--speakers must be >= 2")
    r = model_size_rows(cfg, n_speakers)
    print(f"speakers                      {r['n_speakers']}", file=out)
    print(f"CC-GAN generator params       {r['ccgan_generator']:,}", file=out)
    print(f"CC-GAN discriminator params   {r['ccgan_discriminator']:,}", file=out)
    print(f"CC-GAN total                  {r['ccgan_total']:,}", file=out)
    print(f"CycleGAN pair params          {r['cyclegan_pair']:,}", file=out)
    print(f"CycleGAN pairs needed         {r['fleet_pairs']}", file=out)
    print(f"CycleGAN fleet total          {r['fleet_total']:,}", file=out)
    print(f"ratio CC-GAN / fleet          {r['ratio']:.4f}", file=out)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value settings file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="training seed (overrides the config)")
    common.add_argument("--backend", help="vocoder backend: toy or world")

    p = argparse.ArgumentParser(
        prog="ccgan-vc", description="Voice conversion between any two of n speakers with one speaker-conditioned model."
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract", parents=[common], help="analyze manifest audio into feature files")
    s.add_argument("--manifest", type=Path)
    s.add_argument("--out", type=Path, help="feature cache directory")
    s.add_argument("--force", action="store_true", help="rewrite up-to-date outputs")

    s = sub.add_parser("stats", parents=[common], help="per-speaker F0 and MCC statistics")
    s.add_argument("--manifest", type=Path)
    s.add_argument("--features", type=Path, help="feature cache directory")
    s.add_argument("--out", type=Path, help="stats JSON path")

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--manifest", type=Path)
    s.add_argument("--features", type=Path)
    s.add_argument("--out", type=Path, help="checkpoint directory")
    s.add_argument("--resume", type=Path, help="continue from this checkpoint")
    s.add_argument("--stop-after-epoch", type=int, help="halt after this epoch (schedule unchanged)")

    s = sub.add_parser("convert", parents=[common], help="convert one utterance")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--src", required=True)
    s.add_argument("--tgt", required=True)
    s.add_argument("--features-out", type=Path, help="also write the converted features")
    s.add_argument("input", type=Path, help="WAV or .ccvc file")
    s.add_argument("output", type=Path, help="output WAV")

    s = sub.add_parser("evaluate", parents=[common], help="MCD/MSD report")
    s.add_argument("converted_dir", type=Path)
    s.add_argument("reference_dir", type=Path)
    s.add_argument("--manifest", type=Path)
    s.add_argument("--csv", type=Path, default=Path("eval_report.csv"))
    s.add_argument("--segment", type=int, default=64)

    s = sub.add_parser("model-size", parents=[common], help="compare parameter counts with a CycleGAN fleet")
    s.add_argument("--speakers", type=int, required=True)
    return p


def _apply_args(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "manifest", None) is not None:
        cfg.manifest = args.manifest
    if args.command == "extract" and args.out is not None:
        cfg.feature_dir = args.out
    if args.command in ("stats", "train") and args.features is not None:
        cfg.feature_dir = args.features
    if args.command == "stats" and args.out is not None:
        cfg.stats = args.out
    if args.command == "train" and args.out is not None:
        cfg.checkpoint_dir = args.out
    if args.backend is not None:
        cfg.backend = args.backend
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _apply_args(load_run_config(args.config, args.overrides, args.seed), args)
        if args.command == "extract":
            return cmd_extract(cfg, force=args.force)
        if args.command == "stats":
            return cmd_stats(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume, stop_after_epoch=args.stop_after_epoch)
        if args.command == "convert":
            return cmd_convert(cfg, args.checkpoint, args.src, args.tgt, args.input, args.output, args.features_out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.converted_dir, args.reference_dir, args.csv, args.segment)
        if args.command == "model-size":
            return cmd_model_size(cfg, args.speakers)
    except KeyError as e:
        print(f"error: {e.args[0] if e.args else e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ManifestError, FileNotFoundError, CheckpointError, FeatureFileError,
            VocoderError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
