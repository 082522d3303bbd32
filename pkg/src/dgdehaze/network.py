"""U-shaped dehazing network with physics-aware blocks and guidance injection.

The basic block is a two-stage feature extractor.  Stage 1 is a gated
convolution unit: BatchNorm, pointwise + depthwise conv, a sigmoid gate
computed from the extracted feature, pointwise projection, residual add.
Stage 2 (switchable for ablations) is BatchNorm, pointwise conv, channel
attention, a physics inversion step, pointwise projection, residual add.

The physics inversion block estimates a per-channel airlight feature (global
average pooling + pointwise transform) and a full-resolution inverse
transmission feature (pointwise expansion, two 3x3 convs with GELU, pointwise
projection), then recombines them as ``f * v + a * (1 - v)`` — the scattering
inversion applied in feature space.

Guidance enters through two injection blocks: an additive fusion block for
shallow levels and a multiplicative attention block for deep levels.  The
network predicts a residual added to its input (near-identity at init: the
output projection is zero-initialized) and clamps the result to [0, 1].
"""

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .guidance import area_resample_matrix


@dataclass(frozen=True)
class NetworkConfig:
    num_levels: int = 3
    base_channels: int = 16
    blocks_per_level: int = 2
    channel_attention_ratio: int = 4
    enable_stage2: bool = True
    enable_guidance_fusion: bool = True
    enable_guidance_attention: bool = True
    fusion_levels: tuple = (0,)
    attention_levels: tuple = None  # None -> bottleneck only

    def __post_init__(self):
        if self.num_levels < 1:
            raise ValueError(f"num_levels must be >= 1, got {self.num_levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.blocks_per_level < 0:
            raise ValueError("blocks_per_level must be >= 0")
        if self.enable_stage2 and self.blocks_per_level > 0:
            if self.base_channels % self.channel_attention_ratio:
                raise ValueError(
                    f"base_channels {self.base_channels} not divisible by "
                    f"attention ratio {self.channel_attention_ratio}")
        if self.attention_levels is None:
            object.__setattr__(self, "attention_levels", (self.num_levels - 1,))
        object.__setattr__(self, "fusion_levels", tuple(self.fusion_levels))
        object.__setattr__(self, "attention_levels", tuple(self.attention_levels))
        for lvl in self.fusion_levels + self.attention_levels:
            if not 0 <= lvl < self.num_levels:
                raise ValueError(f"injection level {lvl} out of range "
                                 f"for {self.num_levels} levels")

    def to_dict(self):
        d = asdict(self)
        d["fusion_levels"] = list(self.fusion_levels)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["fusion_levels"] = tuple(d["fusion_levels"])
        d["attention_levels"] = tuple(d["attention_levels"])
        return cls(**d)


class ChannelAttention(nn.Module):
    """Squeeze-excitation gate: GAP -> reduce -> ReLU -> expand -> sigmoid."""

    def __init__(self, channels, ratio=4):
        super().__init__()
        if channels % ratio:
            raise ValueError(f"channels {channels} not divisible by ratio {ratio}")
        self.reduce = nn.Conv2d(channels, channels // ratio, 1)
        self.expand = nn.Conv2d(channels // ratio, channels, 1)

    def forward(self, x):
        scale = torch.sigmoid(self.expand(F.relu(self.reduce(
            x.mean(dim=(2, 3), keepdim=True)))))
        return x * scale


class PhysicsInversionBlock(nn.Module):
    """Scattering inversion in feature space: f * v + a * (1 - v)."""

    def __init__(self, channels, expansion=2):
        super().__init__()
        mid = channels * expansion
        self.air_proj = nn.Conv2d(channels, channels, 1)
        self.inv_expand = nn.Conv2d(channels, mid, 1)
        self.inv_conv1 = nn.Conv2d(mid, mid, 3, padding=1)
        self.inv_conv2 = nn.Conv2d(mid, mid, 3, padding=1)
        self.inv_proj = nn.Conv2d(mid, channels, 1)

    def estimate(self, x):
        """Returns (airlight feature (B,C,1,1), inverse transmission (B,C,H,W))."""
        air = self.air_proj(x.mean(dim=(2, 3), keepdim=True))
        v = self.inv_expand(x)
        v = F.gelu(self.inv_conv1(v))
        v = F.gelu(self.inv_conv2(v))
        return air, self.inv_proj(v)

    def forward(self, x):
        air, inv_t = self.estimate(x)
        return x * inv_t + air * (1.0 - inv_t)


class EnhancementBlock(nn.Module):
    """Two-stage feature block: gated conv stage + attention/physics stage."""

    def __init__(self, channels, ca_ratio=4, stage2=True):
        super().__init__()
        self.norm1 = nn.BatchNorm2d(channels)
        self.pw1 = nn.Conv2d(channels, channels, 1)
        self.dw = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.gate = nn.Conv2d(channels, channels, 1)
        self.proj1 = nn.Conv2d(channels, channels, 1)
        self.stage2 = stage2
        if stage2:
            self.norm2 = nn.BatchNorm2d(channels)
            self.pw2 = nn.Conv2d(channels, channels, 1)
            self.attn = ChannelAttention(channels, ca_ratio)
            self.physics = PhysicsInversionBlock(channels)
            self.proj2 = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        v = self.dw(self.pw1(self.norm1(x)))
        v = v * torch.sigmoid(self.gate(v))
        x = x + self.proj1(v)
        if self.stage2:
            v = self.pw2(self.norm2(x))
            v = self.attn(v)
            v = self.physics(v)
            x = x + self.proj2(v)
        return x


class GuidanceFusion(nn.Module):
    """Additive guidance injection: lift the mask to C channels, sum with f."""

    def __init__(self, channels):
        super().__init__()
        self.pw = nn.Conv2d(1, channels, 1)
        self.dw = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)

    def forward(self, feature, guide):
        if feature.shape[-2:] != guide.shape[-2:]:
            raise ValueError(f"guidance {tuple(guide.shape[-2:])} does not match "
                             f"feature {tuple(feature.shape[-2:])}")
        return feature + self.dw(self.pw(guide))


class GuidanceAttention(nn.Module):
    """Multiplicative guidance injection: f * ReLU(PW(ReLU(PW(f) + PW(g))))."""

    def __init__(self, channels):
        super().__init__()
        self.feat_pw = nn.Conv2d(channels, channels, 1)
        self.guide_pw = nn.Conv2d(1, channels, 1)
        self.mix_pw = nn.Conv2d(channels, channels, 1)

    def forward(self, feature, guide):
        if feature.shape[-2:] != guide.shape[-2:]:
            raise ValueError(f"guidance {tuple(guide.shape[-2:])} does not match "
                             f"feature {tuple(feature.shape[-2:])}")
        attn = F.relu(self.mix_pw(F.relu(self.feat_pw(feature) + self.guide_pw(guide))))
        return feature * attn


class DehazeNet(nn.Module):
    """Guided U-shaped dehazer; output dims always equal input dims.

    Downsampling is a stride-2 conv, upsampling nearest-neighbor followed by
    a conv; skip connections are additive.  Inputs whose sides are not
    divisible by 2^(num_levels-1) are reflection-padded and the output is
    cropped back.  Guidance is resampled internally to every injection
    level's resolution by exact area averaging; with both injection types
    disabled the guidance input is ignored entirely.
    """

    def __init__(self, config=NetworkConfig()):
        super().__init__()
        self.net_config = config
        L = config.num_levels
        chans = [config.base_channels * (2 ** l) for l in range(L)]

        def stack(c):
            return nn.Sequential(*[
                EnhancementBlock(c, config.channel_attention_ratio,
                                 config.enable_stage2)
                for _ in range(config.blocks_per_level)])

        self.in_proj = nn.Conv2d(3, chans[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList([stack(chans[l]) for l in range(L)])
        self.downs = nn.ModuleList([
            nn.Conv2d(chans[l], chans[l + 1], 3, stride=2, padding=1)
            for l in range(L - 1)])
        self.ups = nn.ModuleList([
            nn.Conv2d(chans[l + 1], chans[l], 3, padding=1)
            for l in range(L - 1)])
        self.dec_blocks = nn.ModuleList([stack(chans[l]) for l in range(L - 1)])
        self.out_proj = nn.Conv2d(chans[0], 3, 3, padding=1)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

        self.fusions = nn.ModuleDict()
        self.attns = nn.ModuleDict()
        if config.enable_guidance_fusion:
            for lvl in config.fusion_levels:
                self.fusions[str(lvl)] = GuidanceFusion(chans[lvl])
        if config.enable_guidance_attention:
            for lvl in config.attention_levels:
                self.attns[str(lvl)] = GuidanceAttention(chans[lvl])

    @property
    def uses_guidance(self):
        return bool(self.fusions) or bool(self.attns)

    def _resample_to(self, guide, h, w):
        gh, gw = guide.shape[-2:]
        if (gh, gw) == (h, w):
            return guide
        rows = torch.from_numpy(
            area_resample_matrix(gh, h, np.float64)).to(guide.dtype)
        cols = torch.from_numpy(
            area_resample_matrix(gw, w, np.float64)).to(guide.dtype)
        return torch.einsum("oh,bchw,pw->bcop", rows, guide, cols)

    def forward(self, hazy, guidance=None):
        """hazy: (B,3,H,W) in [0,1]; guidance: (B,1,H,W) or None (= zeros)."""
        b, _, h, w = hazy.shape
        mult = 2 ** (self.net_config.num_levels - 1)
        pad_h = (mult - h % mult) % mult
        pad_w = (mult - w % mult) % mult
        x_in = F.pad(hazy, (0, pad_w, 0, pad_h), mode="reflect") if (pad_h or pad_w) else hazy

        guide = None
        if self.uses_guidance:
            if guidance is None:
                guide = x_in.new_zeros((b, 1, x_in.shape[-2], x_in.shape[-1]))
            else:
                guide = (F.pad(guidance, (0, pad_w, 0, pad_h), mode="reflect")
                         if (pad_h or pad_w) else guidance)

        x = self.in_proj(x_in)
        skips = []
        L = self.net_config.num_levels
        for lvl in range(L):
            key = str(lvl)
            if key in self.fusions or key in self.attns:
                g = self._resample_to(guide, x.shape[-2], x.shape[-1])
                if key in self.fusions:
                    x = self.fusions[key](x, g)
                if key in self.attns:
                    x = self.attns[key](x, g)
            x = self.enc_blocks[lvl](x)
            if lvl < L - 1:
                skips.append(x)
                x = self.downs[lvl](x)
        for lvl in range(L - 2, -1, -1):
            x = self.ups[lvl](F.interpolate(x, scale_factor=2, mode="nearest"))
            x = x + skips[lvl]
            x = self.dec_blocks[lvl](x)
        out = torch.clamp(x_in + self.out_proj(x), 0.0, 1.0)
        return out[:, :, :h, :w]


def count_params(config):
    """Exact trainable parameter count for a given configuration."""
    torch.manual_seed(0)
    model = DehazeNet(config)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
