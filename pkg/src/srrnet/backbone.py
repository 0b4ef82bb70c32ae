"""Four-stage pyramid encoder over the three frame branches.

Each stage tokenizes its input with an overlapping strided convolution, runs a
stack of asymmetric attention blocks, and reshapes the tokens back into
feature maps. Stage ``i`` emits maps of extent ``H / 2^(i+1)``. The previous
and reference branches share every weight set; the current branch has its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import ATTENTION_MODES, AttentionConfig, BranchTokens, RMABlock
from .nn import Conv2d, LayerNorm, Module
from .tensor import ConfigurationError, Tensor


@dataclass
class StageConfig:
    channels: int
    depth: int
    attention: AttentionConfig
    embed_kernel: int = 3
    embed_stride: int = 2
    embed_padding: int = 1

    def __post_init__(self):
        if self.attention.channels != self.channels:
            raise ConfigurationError(
                f"heads x head_dim = {self.attention.channels} must equal stage channels {self.channels}")


@dataclass
class FrameTriplet:
    """Network input: current frame, previous frame+mask, reference frame+mask."""

    c_img: Tensor  # B x 3 x H x W
    p_in: Tensor   # B x 4 x H x W (image with mask channel appended)
    r_in: Tensor   # B x 4 x H x W

    def __post_init__(self):
        for name in ("c_img", "p_in", "r_in"):
            value = getattr(self, name)
            if not isinstance(value, Tensor):
                setattr(self, name, Tensor(value))
        if self.c_img.shape[1] != 3 or self.p_in.shape[1] != 4 or self.r_in.shape[1] != 4:
            raise T.ShapeMismatchError(
                f"triplet channels must be 3/4/4, got {self.c_img.shape[1]}/{self.p_in.shape[1]}/{self.r_in.shape[1]}")
        _, _, h, w = self.c_img.shape
        if self.p_in.shape[2:] != (h, w) or self.r_in.shape[2:] != (h, w):
            raise T.ShapeMismatchError("triplet spatial extents disagree")
        if h % 32 or w % 32:
            raise ConfigurationError(f"input extent {h}x{w} must be divisible by 32")

    @property
    def height(self) -> int:
        return self.c_img.shape[2]

    @property
    def width(self) -> int:
        return self.c_img.shape[3]


@dataclass
class PyramidFeatures:
    """Per-stage feature maps for the three branches, each B x Ch_i x H_i x W_i."""

    c: list = field(default_factory=list)
    p: list = field(default_factory=list)
    r: list = field(default_factory=list)


class PatchEmbed(Module):
    """Overlapping strided convolution followed by token layer norm."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int,
                 padding: int, rng: np.random.Generator):
        self.conv = Conv2d(in_channels, out_channels, kernel, rng,
                           stride=stride, padding=padding)
        self.norm = LayerNorm(out_channels)

    def __call__(self, x: Tensor) -> tuple[Tensor, int, int]:
        m = self.conv(x)
        batch, ch, h, w = m.shape
        tokens = T.reshape(T.transpose(m, (0, 2, 3, 1)), (batch, h * w, ch))
        return self.norm(tokens), h, w


def _tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    batch, _, ch = tokens.shape
    return T.transpose(T.reshape(tokens, (batch, h, w, ch)), (0, 3, 1, 2))


class BackboneStage(Module):
    def __init__(self, in_c: int, in_pr: int, cfg: StageConfig, rng: np.random.Generator,
                 attention_mode: str):
        self.embed_c = PatchEmbed(in_c, cfg.channels, cfg.embed_kernel,
                                  cfg.embed_stride, cfg.embed_padding, rng)
        self.embed_pr = PatchEmbed(in_pr, cfg.channels, cfg.embed_kernel,
                                   cfg.embed_stride, cfg.embed_padding, rng)
        self.blocks = [RMABlock(cfg.attention, rng, mode=attention_mode)
                       for _ in range(cfg.depth)]
        self.norm_c = LayerNorm(cfg.channels)
        self.norm_pr = LayerNorm(cfg.channels)

    def __call__(self, c_map: Tensor, p_map: Tensor, r_map: Tensor):
        c, h, w = self.embed_c(c_map)
        p, _, _ = self.embed_pr(p_map)
        r, _, _ = self.embed_pr(r_map)
        tokens = BranchTokens(c, p, r, h, w)
        for block in self.blocks:
            tokens = block(tokens)
        c = _tokens_to_map(self.norm_c(tokens.c), h, w)
        p = _tokens_to_map(self.norm_pr(tokens.p), h, w)
        r = _tokens_to_map(self.norm_pr(tokens.r), h, w)
        return c, p, r


class RMABackbone(Module):
    """The full four-stage encoder producing the 4 x 3 feature grid."""

    def __init__(self, stages: list[StageConfig], rng: np.random.Generator,
                 attention_mode: str = "rma"):
        if len(stages) != 4:
            raise ConfigurationError(f"expected 4 stage configs, got {len(stages)}")
        if attention_mode not in ATTENTION_MODES:
            raise ConfigurationError(f"unknown attention mode {attention_mode!r}")
        if stages[0].embed_stride != 4:
            raise ConfigurationError("stage-1 embedding stride must be 4")
        for i, s in enumerate(stages[1:], start=2):
            if s.embed_stride != 2:
                raise ConfigurationError(f"stage-{i} embedding stride must be 2")
        for prev, cur in zip(stages, stages[1:]):
            if cur.channels < prev.channels:
                raise ConfigurationError("stage channels must be nondecreasing")
        self.stage_configs = stages
        self.attention_mode = attention_mode
        built = []
        in_c, in_pr = 3, 4
        for cfg in stages:
            built.append(BackboneStage(in_c, in_pr, cfg, rng, attention_mode))
            in_c = in_pr = cfg.channels
        self.stages = built

    def __call__(self, triplet: FrameTriplet) -> PyramidFeatures:
        features = PyramidFeatures()
        c, p, r = triplet.c_img, triplet.p_in, triplet.r_in
        for stage in self.stages:
            c, p, r = stage(c, p, r)
            features.c.append(c)
            features.p.append(p)
            features.r.append(r)
        return features
