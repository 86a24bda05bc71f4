"""Speaker-conditioned GLU generator, multi-output discriminator, and the CycleGAN baseline.

Conditioning tiles a one-hot identity vector over every position of a
feature map and concatenates it as extra channels in front of a layer.
Which layers see which identity:

* generator: source id at the first conv and both downsampling convs,
  source and target ids at every residual-block conv, target id at both
  upsampling convs and the last conv;
* discriminator: target id at every layer, including the head.

``ModelParams`` are plain ``torch.nn.Module`` objects; ``named_arrays``
exposes them as a name -> array mapping.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Mapping

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import N_MCC, is_one_hot

INIT_GAIN = 0.02
# keeps scores strictly inside (0, 1) even where the sigmoid saturates numerically
SCORE_EPS = 1e-6


@dataclass(frozen=True)
class GeneratorConfig:
    n_speakers: int
    in_dims: int = N_MCC
    base_channels: int = 64
    n_downsample: int = 2
    n_resblocks: int = 6
    n_upsample: int = 2
    kernel_first: int = 15
    kernel_down: int = 5
    kernel_res: int = 3
    kernel_up: int = 5
    kernel_last: int = 15
    conditioned: bool = True

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValueError("n_speakers must be >= 2")
        if self.n_downsample != self.n_upsample:
            raise ValueError("n_downsample must equal n_upsample")
        if self.base_channels <= 0 or self.in_dims <= 0:
            raise ValueError("channel counts must be positive")

    @property
    def n_cond(self) -> int:
        return self.n_speakers if self.conditioned else 0

    @property
    def time_multiple(self) -> int:
        return 2**self.n_downsample

    def down_widths(self) -> list[int]:
        return [self.base_channels * 2 ** (i + 1) for i in range(self.n_downsample)]

    def up_widths(self) -> list[int]:
        return [self.base_channels * 2 ** (self.n_upsample - 1 - i) for i in range(self.n_upsample)]


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_speakers: int
    in_height: int = N_MCC
    base_channels: int = 64
    n_downsample: int = 3
    kernel_first: int = 3
    kernel_down: int = 3
    stride_down: int = 2
    conditioned: bool = True

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValueError("n_speakers must be >= 2")
        if self.base_channels <= 0:
            raise ValueError("channel counts must be positive")

    @property
    def n_cond(self) -> int:
        return self.n_speakers if self.conditioned else 0

    @property
    def n_outputs(self) -> int:
        return self.n_speakers if self.conditioned else 1

    def down_widths(self) -> list[int]:
        return [self.base_channels * 2 ** (i + 1) for i in range(self.n_downsample)]

    def out_height(self) -> int:
        h = self.in_height
        for _ in range(self.n_downsample):
            h = (h + 2 * (self.kernel_down // 2) - self.kernel_down) // self.stride_down + 1
        return h

    @property
    def min_frames(self) -> int:
        return self.stride_down**self.n_downsample


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    d["kind"] = type(cfg).__name__
    return d


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    cls = {"GeneratorConfig": GeneratorConfig, "DiscriminatorConfig": DiscriminatorConfig}[kind]
    return cls(**d)


# --------------------------------------------------------------------------
# conditioning


def _tile(cond: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    shape = (cond.shape[0], cond.shape[1]) + (1,) * (like.dim() - 2)
    return cond.to(like.dtype).reshape(shape).expand(*shape[:2], *like.shape[2:])


def _concat(h: torch.Tensor, cond: torch.Tensor | None) -> torch.Tensor:
    if cond is None or cond.shape[1] == 0:
        return h
    return torch.cat([h, _tile(cond, h)], dim=1)


def condition_concat(feature_map, speaker_id):
    """Append one constant channel per speaker, channel ``C + k`` filled with ``speaker_id[k]``.

    Accepts C x T (or C x H x W) maps as numpy arrays or tensors and returns
    the same kind.
    """
    if not is_one_hot(np.asarray(speaker_id)):
        raise ValueError(f"speaker id is not one-hot: {np.asarray(speaker_id).tolist()}")
    as_numpy = not isinstance(feature_map, torch.Tensor)
    h = torch.as_tensor(np.asarray(feature_map) if as_numpy else feature_map)
    cond = torch.as_tensor(np.asarray(speaker_id), dtype=h.dtype)[None]
    out = _concat(h[None], cond)[0]
    return out.numpy() if as_numpy else out


def _pixel_shuffle_1d(h: torch.Tensor, r: int = 2) -> torch.Tensor:
    b, c, t = h.shape
    return h.reshape(b, c // r, r, t).permute(0, 1, 3, 2).reshape(b, c // r, t * r)


class InstanceNorm(nn.Module):
    """Per-sample, per-channel normalization over all non-batch, non-channel axes, with affine gain/offset.

    A single spatial position normalizes to 0 (so the output is the offset)
    instead of raising, which lets the generator run at T = 4.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, h):
        axes = tuple(range(2, h.dim()))
        mean = h.mean(dim=axes, keepdim=True)
        var = ((h - mean) ** 2).mean(dim=axes, keepdim=True)
        shape = (1, -1) + (1,) * (h.dim() - 2)
        return (h - mean) / torch.sqrt(var + self.eps) * self.weight.view(shape) + self.bias.view(shape)


class CondConv1d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, n_cond=0):
        super().__init__()
        self.n_cond = n_cond
        self.conv = nn.Conv1d(in_ch + n_cond, out_ch, kernel, stride, padding=kernel // 2)

    def forward(self, h, cond=None):
        return self.conv(_concat(h, cond if self.n_cond else None))


class CondConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, n_cond=0):
        super().__init__()
        self.n_cond = n_cond
        self.conv = nn.Conv2d(in_ch + n_cond, out_ch, kernel, stride, padding=kernel // 2)

    def forward(self, h, cond=None):
        return self.conv(_concat(h, cond if self.n_cond else None))


# --------------------------------------------------------------------------
# generator


class _Down1d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, n_cond):
        super().__init__()
        self.conv = CondConv1d(in_ch, 2 * out_ch, kernel, 2, n_cond)
        self.norm = InstanceNorm(2 * out_ch)

    def forward(self, h, cond):
        return F.glu(self.norm(self.conv(h, cond)), dim=1)


class _Residual1d(nn.Module):
    def __init__(self, ch, kernel, n_cond):
        super().__init__()
        self.conv1 = CondConv1d(ch, 2 * ch, kernel, 1, n_cond)
        self.norm1 = InstanceNorm(2 * ch)
        self.conv2 = CondConv1d(ch, ch, kernel, 1, n_cond)
        self.norm2 = InstanceNorm(ch)

    def forward(self, h, cond):
        g = F.glu(self.norm1(self.conv1(h, cond)), dim=1)
        return h + self.norm2(self.conv2(g, cond))


class _Up1d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, n_cond):
        super().__init__()
        self.conv = CondConv1d(in_ch, 4 * out_ch, kernel, 1, n_cond)
        self.norm = InstanceNorm(2 * out_ch)

    def forward(self, h, cond):
        return F.glu(self.norm(_pixel_shuffle_1d(self.conv(h, cond))), dim=1)


class Generator(nn.Module):
    """Batched forward: ``x`` is B x in_dims x T, ids are B x n one-hots."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config
        n = c.n_cond
        self.first = CondConv1d(c.in_dims, 2 * c.base_channels, c.kernel_first, 1, n)
        ch = c.base_channels
        self.down = nn.ModuleList()
        for w in c.down_widths():
            self.down.append(_Down1d(ch, w, c.kernel_down, n))
            ch = w
        self.res = nn.ModuleList(_Residual1d(ch, c.kernel_res, 2 * n) for _ in range(c.n_resblocks))
        self.up = nn.ModuleList()
        for w in c.up_widths():
            self.up.append(_Up1d(ch, w, c.kernel_up, n))
            ch = w
        self.last = CondConv1d(ch, c.in_dims, c.kernel_last, 1, n)

    def forward(self, x, src_id=None, tgt_id=None):
        both = None
        if self.config.conditioned:
            both = torch.cat([src_id, tgt_id], dim=1)
        h = F.glu(self.first(x, src_id), dim=1)
        for layer in self.down:
            h = layer(h, src_id)
        for block in self.res:
            h = block(h, both)
        for layer in self.up:
            h = layer(h, tgt_id)
        return self.last(h, tgt_id)


# --------------------------------------------------------------------------
# discriminator


class _Down2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride, n_cond):
        super().__init__()
        self.conv = CondConv2d(in_ch, 2 * out_ch, kernel, stride, n_cond)
        self.norm = InstanceNorm(2 * out_ch)

    def forward(self, h, cond):
        return F.glu(self.norm(self.conv(h, cond)), dim=1)


class Discriminator(nn.Module):
    """Scores a B x H x T feature map; returns B x n_outputs values in (0, 1).

    The fully connected head acts on the flattened channel x height column
    at each remaining time step; its logits are averaged over time before
    the per-speaker sigmoids, so any T >= ``min_frames`` is accepted.
    """

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        c = config
        n = c.n_cond
        self.first = CondConv2d(1, 2 * c.base_channels, c.kernel_first, 1, n)
        ch = c.base_channels
        self.down = nn.ModuleList()
        for w in c.down_widths():
            self.down.append(_Down2d(ch, w, c.kernel_down, c.stride_down, n))
            ch = w
        self.head = nn.Conv1d(ch * c.out_height() + n, c.n_outputs, 1)

    def logits(self, x, tgt_id=None):
        cond = tgt_id if self.config.conditioned else None
        h = F.glu(self.first(x[:, None], cond), dim=1)
        for layer in self.down:
            h = layer(h, cond)
        b, ch, hh, w = h.shape
        return self.head(_concat(h.reshape(b, ch * hh, w), cond)).mean(dim=2)

    def forward(self, x, tgt_id=None):
        return SCORE_EPS + (1 - 2 * SCORE_EPS) * torch.sigmoid(self.logits(x, tgt_id))


# --------------------------------------------------------------------------
# construction and inspection


def init_params(config, rng: np.random.Generator):
    """Build a generator or discriminator with deterministic parameters.

    Conv/linear weights ~ N(0, 0.02^2), biases 0, normalization gains 1
    and offsets 0.  Values are drawn from ``rng`` so they do not depend on
    torch's global RNG.
    """
    if isinstance(config, GeneratorConfig):
        model = Generator(config)
    elif isinstance(config, DiscriminatorConfig):
        model = Discriminator(config)
    else:
        raise TypeError(f"not a model config: {type(config).__name__}")
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv1d, nn.Conv2d)):
                w = rng.normal(0.0, INIT_GAIN, size=tuple(module.weight.shape))
                module.weight.copy_(torch.from_numpy(w))
                module.bias.zero_()
            elif isinstance(module, InstanceNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def named_arrays(params) -> dict[str, np.ndarray]:
    if isinstance(params, nn.Module):
        return {k: v.detach().cpu().numpy() for k, v in params.state_dict().items()}
    return {k: np.asarray(v) for k, v in params.items()}


def parameter_count(params) -> int:
    """Total number of scalars in a module, a name->array mapping, or a sequence of either."""
    if isinstance(params, nn.Module):
        return sum(p.numel() for p in params.parameters())
    if isinstance(params, Mapping):
        return int(sum(np.asarray(v).size for v in params.values()))
    return sum(parameter_count(p) for p in params)


def _as_batch(x, dtype):
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    if dtype is not None:
        t = t.to(dtype)
    return t[None] if t.dim() == 2 else t


def _check_id(speaker_id, n, what):
    v = np.asarray(speaker_id.detach().cpu() if isinstance(speaker_id, torch.Tensor) else speaker_id)
    if not is_one_hot(v) or v.size != n:
        raise ValueError(f"{what} is not a valid one-hot of length {n}")
    return torch.as_tensor(v)[None]


def generator_forward(gen: Generator, x, src_id=None, tgt_id=None):
    """Convert a single in_dims x T map; numpy in, numpy out (tensors pass through)."""
    c = gen.config
    dtype = next(gen.parameters()).dtype
    as_numpy = not isinstance(x, torch.Tensor)
    xb = _as_batch(x, dtype)
    if xb.shape[1] != c.in_dims:
        raise ValueError(f"expected {c.in_dims} feature rows, got {xb.shape[1]}")
    if xb.shape[2] % c.time_multiple:
        raise ValueError(f"length not divisible by {c.time_multiple}: {xb.shape[2]}")
    src = tgt = None
    if c.conditioned:
        src = _check_id(src_id, c.n_speakers, "source id").to(dtype)
        tgt = _check_id(tgt_id, c.n_speakers, "target id").to(dtype)
    out = gen(xb, src, tgt)[0]
    return out.detach().numpy() if as_numpy else out


def discriminator_forward(disc: Discriminator, x, tgt_id=None):
    c = disc.config
    dtype = next(disc.parameters()).dtype
    as_numpy = not isinstance(x, torch.Tensor)
    xb = _as_batch(x, dtype)
    if xb.shape[1] != c.in_height:
        raise ValueError(f"expected {c.in_height} feature rows, got {xb.shape[1]}")
    if xb.shape[2] < c.min_frames:
        raise ValueError(f"input too short: {xb.shape[2]} frames < {c.min_frames}")
    tgt = _check_id(tgt_id, c.n_speakers, "target id").to(dtype) if c.conditioned else None
    out = disc(xb, tgt)[0]
    return out.detach().numpy() if as_numpy else out


# --------------------------------------------------------------------------
# CycleGAN baseline


@dataclass
class CycleGANPair:
    """Two unconditioned generators and two single-output discriminators.

    ``to_x`` maps speaker Y to X and ``to_y`` maps X to Y; ``d_x`` and
    ``d_y`` judge membership of X and Y respectively.
    """

    to_x: Generator
    to_y: Generator
    d_x: Discriminator
    d_y: Discriminator

    def modules(self):
        return [self.to_x, self.to_y, self.d_x, self.d_y]


def baseline_configs(gen_config: GeneratorConfig, disc_config: DiscriminatorConfig):
    return (
        replace(gen_config, n_speakers=2, conditioned=False),
        replace(disc_config, n_speakers=2, conditioned=False),
    )


def make_cyclegan_baseline(gen_config, disc_config, rng: np.random.Generator | None = None) -> CycleGANPair:
    rng = rng if rng is not None else np.random.default_rng(0)
    g, d = baseline_configs(gen_config, disc_config)
    return CycleGANPair(init_params(g, rng), init_params(g, rng), init_params(d, rng), init_params(d, rng))


def cyclegan_fleet_size(n_speakers: int) -> int:
    """CycleGAN pairs needed to cover every direction among ``n_speakers``."""
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers")
    return n_speakers * (n_speakers - 1) // 2


class PairAsConditionalGenerator(nn.Module):
    """Presents a CycleGAN pair through the conditional (x, src, tgt) interface, n = 2.

    Index 0 is speaker X, index 1 is speaker Y.
    """

    def __init__(self, pair: CycleGANPair):
        super().__init__()
        self.to_x = pair.to_x
        self.to_y = pair.to_y

    def forward(self, x, src_id, tgt_id):
        rows = []
        for i in range(x.shape[0]):
            g = self.to_x if int(tgt_id[i].argmax()) == 0 else self.to_y
            rows.append(g(x[i : i + 1]))
        return torch.cat(rows, dim=0)


class PairAsMultiOutputDiscriminator(nn.Module):
    """Stacks d_x and d_y into one two-output discriminator."""

    def __init__(self, pair: CycleGANPair):
        super().__init__()
        self.d_x = pair.d_x
        self.d_y = pair.d_y

    def forward(self, x, tgt_id=None):
        return torch.cat([self.d_x(x), self.d_y(x)], dim=1)
