"""Adversarial training loop, learning-rate schedule and checkpoint files."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses
from .corpus import (
    CROP_FRAMES,
    FeatureBundle,
    SpeakerRegistry,
    SpeakerStats,
    TrainingPair,
    UtteranceRecord,
    sample_training_pair,
)
from .losses import LossReport, LossWeights
from .model import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    config_from_dict,
    config_to_dict,
    init_params,
)

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "iter", "d_loss", "g_adv", "g_cycle", "g_identity", "g_total", "lr_g", "lr_d"]

CHECKPOINT_MAGIC = b"CCCK"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_epochs: int = 950
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    crop_frames: int = CROP_FRAMES
    batch_size: int = 1
    weights: LossWeights = LossWeights()
    seed: int = 0
    checkpoint_every: int = 10
    identity_cutoff_epoch: int | None = None
    # None: one iteration per training utterance
    iters_per_epoch: int | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0 <= b < 1:
                raise ValueError("Adam betas must lie in [0, 1)")
        if self.crop_frames <= 0 or self.crop_frames % 4:
            raise ValueError("crop_frames must be a positive multiple of 4")
        if self.batch_size != 1:
            raise ValueError("only batch_size = 1 is supported")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def lr_at(epoch: int, base_lr: float, total_epochs: int) -> float:
    """Constant for the first half of training, then linear decay to 0 at ``total_epochs``."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    half = total_epochs / 2
    if epoch < half:
        return base_lr
    return base_lr * (1.0 - (epoch - half) / half)


# --------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    gen: Generator
    disc: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: np.random.Generator
    epoch: int = 0
    iteration: int = 0

    def copy(self) -> "TrainState":
        return copy.deepcopy(self)

    def set_lr(self, lr_g: float, lr_d: float) -> None:
        for group in self.opt_g.param_groups:
            group["lr"] = lr_g
        for group in self.opt_d.param_groups:
            group["lr"] = lr_d

    @property
    def lr(self) -> tuple[float, float]:
        return self.opt_g.param_groups[0]["lr"], self.opt_d.param_groups[0]["lr"]


def _adam(module, lr, config: TrainConfig):
    return torch.optim.Adam(module.parameters(), lr=lr, betas=(config.adam_beta1, config.adam_beta2))


def new_train_state(gen_config: GeneratorConfig, disc_config: DiscriminatorConfig, config: TrainConfig) -> TrainState:
    init_rng = np.random.default_rng([config.seed, 0])
    gen = init_params(gen_config, init_rng)
    disc = init_params(disc_config, init_rng)
    return TrainState(
        gen=gen,
        disc=disc,
        opt_g=_adam(gen, config.lr_g, config),
        opt_d=_adam(disc, config.lr_d, config),
        rng=np.random.default_rng([config.seed, 1]),
    )


def _check_finite(**terms):
    for name, value in terms.items():
        v = float(value.detach())
        if not math.isfinite(v):
            raise NonFiniteLossError(f"non-finite {name} ({v}); aborting training")


def train_step(state: TrainState, pair: TrainingPair, config: TrainConfig) -> tuple[TrainState, LossReport]:
    """One discriminator update followed by one generator update (in place).

    The conversion fed to the discriminator update is detached; the
    generator update rescores it with the freshly updated discriminator.
    """
    dtype = next(state.gen.parameters()).dtype
    x, src, y, tgt = (torch.as_tensor(np.asarray(a)).to(dtype)[None] for a in pair)
    if x.shape[-1] != config.crop_frames or y.shape[-1] != config.crop_frames:
        raise ValueError(f"pair crops must be {config.crop_frames} frames")
    w = config.weights
    if config.identity_cutoff_epoch is not None and state.epoch >= config.identity_cutoff_epoch:
        w = LossWeights(w.w_gan, w.w_cycle, 0.0)

    fake = state.gen(x, src, tgt)

    state.opt_d.zero_grad(set_to_none=True)
    loss_d = losses.d_loss(state.disc(y, tgt), tgt, state.disc(fake.detach(), tgt))
    _check_finite(d_loss=loss_d)
    loss_d.backward()
    state.opt_d.step()

    state.opt_g.zero_grad(set_to_none=True)
    g_adv = losses.g_adv_loss(state.disc(fake, tgt), tgt)
    g_cycle = losses.cycle_loss(x, state.gen(fake, tgt, src))
    g_identity = losses.identity_loss(x, state.gen(x, tgt, src))
    _check_finite(g_adv=g_adv, g_cycle=g_cycle, g_identity=g_identity)
    g_total = losses.total_g_loss(g_adv, g_cycle, g_identity, w)
    g_total.backward()
    state.opt_g.step()
    # D gradients from the generator pass are discarded at the next zero_grad

    state.iteration += 1
    report = LossReport(
        d_loss=float(loss_d.detach()),
        g_adv=float(g_adv.detach()),
        g_cycle=float(g_cycle.detach()),
        g_identity=float(g_identity.detach()),
        g_total=float(g_total.detach()),
    )
    return state, report


# --------------------------------------------------------------------------
# checkpoints


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(**d)


@dataclass
class Checkpoint:
    gen_config: GeneratorConfig
    disc_config: DiscriminatorConfig
    train_config: TrainConfig
    state: TrainState
    registry: SpeakerRegistry
    stats: list[SpeakerStats]
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @property
    def generator(self) -> Generator:
        return self.state.gen


def _pack_text(name: str, text: str) -> bytes:
    nb, tb = name.encode(), text.encode("utf-8")
    return struct.pack("<BI", 0, len(nb)) + nb + struct.pack("<I", len(tb)) + tb


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    a = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    head = struct.pack("<BI", 1, len(nb)) + nb + struct.pack("<I", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def _optimizer_arrays(prefix, opt):
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{prefix}/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically (temp file then rename)."""
    st = ckpt.state
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "gen_config": config_to_dict(ckpt.gen_config),
        "disc_config": config_to_dict(ckpt.disc_config),
        "train_config": train_config_to_dict(ckpt.train_config),
        "registry": ckpt.registry.to_dict(),
        "stats": [s.to_dict() for s in ckpt.stats],
        "epoch": st.epoch,
        "iteration": st.iteration,
        "rng": st.rng.bit_generator.state,
        "opt_g_groups": st.opt_g.state_dict()["param_groups"],
        "opt_d_groups": st.opt_d.state_dict()["param_groups"],
        "extra": ckpt.extra,
    }
    arrays = {}
    for prefix, module in (("gen", st.gen), ("disc", st.disc)):
        for k, v in module.state_dict().items():
            arrays[f"{prefix}/{k}"] = v.detach().cpu().numpy()
    arrays.update(_optimizer_arrays("opt_g", st.opt_g))
    arrays.update(_optimizer_arrays("opt_d", st.opt_d))

    sections = [_pack_text("meta", json.dumps(meta))]
    sections += [_pack_array(k, v) for k, v in arrays.items()]
    payload = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(sections)) + b"".join(sections)
    payload += struct.pack("<I", zlib.crc32(payload))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def _read_sections(data: bytes, path) -> tuple[dict, dict]:
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n_sections = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt checkpoint)")
    texts, arrays = {}, {}
    pos = 12
    try:
        for _ in range(n_sections):
            kind, nlen = struct.unpack_from("<BI", data, pos)
            pos += 5
            name = data[pos : pos + nlen].decode()
            pos += nlen
            if kind == 0:
                (tlen,) = struct.unpack_from("<I", data, pos)
                pos += 4
                texts[name] = data[pos : pos + tlen].decode("utf-8")
                pos += tlen
            elif kind == 1:
                (ndim,) = struct.unpack_from("<I", data, pos)
                pos += 4
                shape = struct.unpack_from(f"<{ndim}I", data, pos)
                pos += 4 * ndim
                count = int(np.prod(shape)) if ndim else 1
                arrays[name] = np.frombuffer(data, "<f4", count, pos).reshape(shape).astype(np.float32)
                pos += 4 * count
            else:
                raise CheckpointError(f"{path}: unknown section kind {kind}")
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from None
    if pos != len(data) - 4:
        raise CheckpointError(f"{path}: trailing bytes in checkpoint")
    return texts, arrays


def _load_optimizer(opt, groups, arrays, prefix):
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    # JSON turns tuples into lists
    groups = [{k: tuple(v) if k == "betas" else v for k, v in g.items()} for g in groups]
    opt.load_state_dict({"state": state, "param_groups": groups})


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    texts, arrays = _read_sections(path.read_bytes(), path)
    meta = json.loads(texts["meta"])
    gen_config = config_from_dict(meta["gen_config"])
    disc_config = config_from_dict(meta["disc_config"])
    train_config = train_config_from_dict(meta["train_config"])

    gen, disc = Generator(gen_config), Discriminator(disc_config)
    for prefix, module in (("gen", gen), ("disc", disc)):
        sd = {k: torch.from_numpy(arrays[f"{prefix}/{k}"].copy()) for k in module.state_dict()}
        module.load_state_dict(sd)
    opt_g, opt_d = _adam(gen, train_config.lr_g, train_config), _adam(disc, train_config.lr_d, train_config)
    _load_optimizer(opt_g, meta["opt_g_groups"], arrays, "opt_g")
    _load_optimizer(opt_d, meta["opt_d_groups"], arrays, "opt_d")

    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainState(gen, disc, opt_g, opt_d, rng, meta["epoch"], meta["iteration"])
    return Checkpoint(
        gen_config,
        disc_config,
        train_config,
        state,
        SpeakerRegistry.from_dict(meta["registry"]),
        [SpeakerStats.from_dict(s) for s in meta["stats"]],
        meta.get("extra", {}),
        meta["format_version"],
    )


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    history: list[dict]


def _mean_report(reports: Sequence[LossReport]) -> dict:
    keys = ["d_loss", "g_adv", "g_cycle", "g_identity", "g_total"]
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}


def _append_log(path: Path, row: dict) -> None:
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(LOG_HEADER)
        w.writerow([row[k] if isinstance(row[k], int) else repr(row[k]) for k in LOG_HEADER])


def read_loss_log(path) -> list[dict]:
    with Path(path).open(newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k in ("epoch", "iter") else float(v)) for k, v in r.items()} for r in rows]


def run_training(
    config: TrainConfig,
    dataset: Sequence[tuple[UtteranceRecord, FeatureBundle]],
    registry: SpeakerRegistry,
    stats: Sequence[SpeakerStats],
    gen_config: GeneratorConfig,
    disc_config: DiscriminatorConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    extra: dict | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    stop_after_epoch: int | None = None,
    log_dir=None,
) -> TrainingResult:
    """Train for ``config.total_epochs`` epochs (or up to ``stop_after_epoch``).

    With ``out_dir`` set, appends one row per epoch to ``loss_log.csv`` and
    writes ``ckpt_eNNNN.ccck`` every ``checkpoint_every`` epochs plus
    ``latest.ccck`` at the end (the log goes to ``log_dir`` instead when
    given).  ``resume`` continues from a checkpoint's
    state, epoch counter and RNG.
    """
    n_train = sum(1 for r, _ in dataset if r.split == "train")
    iters = config.iters_per_epoch or n_train
    if iters < 1:
        raise ValueError("no training utterances")

    if resume is not None:
        state = resume.state
    else:
        state = new_train_state(gen_config, disc_config, config)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_dir = Path(log_dir) if log_dir is not None else out_dir
        log_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_dir / "loss_log.csv"

    def checkpoint():
        return Checkpoint(gen_config, disc_config, config, state, registry, list(stats), dict(extra or {}))

    history = []
    last = config.total_epochs if stop_after_epoch is None else min(stop_after_epoch, config.total_epochs)
    for epoch in range(state.epoch, last):
        lr_g = lr_at(epoch, config.lr_g, config.total_epochs)
        lr_d = lr_at(epoch, config.lr_d, config.total_epochs)
        state.set_lr(lr_g, lr_d)
        reports = []
        for _ in range(iters):
            pair = sample_training_pair(dataset, registry, stats, state.rng, config.crop_frames)
            state, report = train_step(state, pair, config)
            reports.append(report)
        state.epoch = epoch + 1
        row = {"epoch": epoch, "iter": state.iteration, **_mean_report(reports), "lr_g": lr_g, "lr_d": lr_d}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if out_dir is not None:
            _append_log(log_path, row)
            if config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                save_checkpoint(checkpoint(), out_dir / f"ckpt_e{state.epoch:04d}.ccck")

    final = checkpoint()
    if out_dir is not None:
        save_checkpoint(final, out_dir / "latest.ccck")
    return TrainingResult(final, history)
