"""Subband-aware convolutional data-prediction network.

Layout: a subband encoder splits the (4, F, L) real input (RI of the noisy
state stacked with RI of the condition) into uneven frequency regions, each
strided down to equal-width subbands; a stack of large-kernel convolutional
attention blocks mixes subbands and frames; a subband decoder transposes the
regions back to the full spectrum as RI channels. Every stage is modulated by
a time embedding through low-rank scale/shift/gate projections, with the
final pointwise layers zero-initialized so each block starts as identity.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
from torch import nn

REGION_FIELDS = ("freq_span", "kernel_f", "stride_f", "kernel_t", "stride_t")

# 512 of the 513 bins tiled as 12 subbands of width 12, 8 of 24, 4 of 44;
# the Nyquist bin is dropped at encoding and written back as zero
DEFAULT_REGIONS = ((144, 12, 12, 3, 1), (192, 24, 24, 3, 1), (176, 44, 44, 3, 1))


@dataclass(frozen=True)
class BCDConfig:
    """Network topology: region table, width, depth, kernels, conditioning."""

    regions: tuple[tuple[int, int, int, int, int], ...] = DEFAULT_REGIONS
    channels: int = 256
    num_blocks: int = 8
    lk_kernel_f: int = 9
    lk_kernel_t: int = 11
    time_embed_dim: int = 512
    sola_rank: int = 32
    ffn_expansion: int = 2

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(tuple(int(v) for v in r) for r in self.regions))
        if not self.regions:
            raise ValueError("at least one frequency region is required")
        for region in self.regions:
            if len(region) != 5:
                raise ValueError(f"region must be {REGION_FIELDS}, got {region}")
            span, kf, sf, kt, st = region
            if span <= 0 or kf <= 0 or sf <= 0:
                raise ValueError(f"region sizes must be positive: {region}")
            if span % sf != 0:
                raise ValueError(f"freq_span {span} not divisible by stride {sf}")
            if kf != sf:
                raise ValueError(f"freq kernel must equal freq stride (got {kf} vs {sf})")
            if kt % 2 != 1 or st != 1:
                raise ValueError("time kernel must be odd with stride 1")
        if self.lk_kernel_f % 2 != 1 or self.lk_kernel_t % 2 != 1:
            raise ValueError("large-kernel extents must be odd")
        for name in ("channels", "num_blocks", "time_embed_dim", "sola_rank", "ffn_expansion"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def net_freq_bins(self) -> int:
        return sum(r[0] for r in self.regions)

    @property
    def n_subbands(self) -> int:
        return sum(r[0] // r[2] for r in self.regions)

    @property
    def region_subbands(self) -> tuple[int, ...]:
        return tuple(r[0] // r[2] for r in self.regions)

    def to_dict(self) -> dict:
        return {
            "regions": [list(r) for r in self.regions],
            "channels": self.channels,
            "num_blocks": self.num_blocks,
            "lk_kernel_f": self.lk_kernel_f,
            "lk_kernel_t": self.lk_kernel_t,
            "time_embed_dim": self.time_embed_dim,
            "sola_rank": self.sola_rank,
            "ffn_expansion": self.ffn_expansion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BCDConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        if "regions" in d:
            d["regions"] = tuple(tuple(r) for r in d["regions"])
        return cls(**d)


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel axis of (B, C, N, L) features."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]


def sinusoidal_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos features of the diffusion time, t in [0, 1] scaled by 1000."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / (half - 1)
    )
    angles = t[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class TimeEmbedding(nn.Module):
    """Sinusoidal time features refined by a two-layer perceptron."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if t.ndim != 1:
            raise ValueError(f"time must be a 1-D batch vector, got shape {tuple(t.shape)}")
        return self.mlp(sinusoidal_features(t, self.dim))


class LowRankModulation(nn.Module):
    """Rank-bottlenecked projection of the time embedding into per-channel deltas.

    Emits n_out chunks of size `channels`; the up projection is zero-initialized
    so every modulation starts as the identity (scale 1, shift 0, gate 1).
    """

    def __init__(self, embed_dim: int, rank: int, channels: int, n_out: int):
        super().__init__()
        self.n_out = n_out
        self.act = nn.SiLU()
        self.down = nn.Linear(embed_dim, rank)
        self.up = nn.Linear(rank, n_out * channels)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, e: torch.Tensor) -> tuple[torch.Tensor, ...]:
        out = self.up(self.down(self.act(e)))
        return tuple(chunk[:, :, None, None] for chunk in out.chunk(self.n_out, dim=-1))


class FullModulation(nn.Module):
    """Dense scale/shift projection used at the encoder input and decoder regions."""

    def __init__(self, embed_dim: int, channels: int):
        super().__init__()
        self.act = nn.SiLU()
        self.proj = nn.Linear(embed_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        scale, shift = self.proj(self.act(e)).chunk(2, dim=-1)
        return scale[:, :, None, None], shift[:, :, None, None]


class SubbandEncoder(nn.Module):
    """Per-region strided convolutions compressing frequency spans into subbands."""

    def __init__(self, cfg: BCDConfig, in_channels: int = 4):
        super().__init__()
        self.cfg = cfg
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for span, kf, sf, kt, st in cfg.regions:
            self.convs.append(
                nn.Conv2d(in_channels, cfg.channels, (kf, kt), (sf, st), padding=(0, (kt - 1) // 2))
            )
            self.norms.append(ChannelLayerNorm(cfg.channels))
        self.modulation = FullModulation(cfg.time_embed_dim, cfg.channels)

    def forward(self, x: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != self.cfg.net_freq_bins:
            raise ValueError(
                f"input has {x.shape[-2]} bins, region table covers {self.cfg.net_freq_bins}"
            )
        parts = []
        lo = 0
        for conv, norm, (span, *_rest) in zip(self.convs, self.norms, self.cfg.regions):
            parts.append(norm(conv(x[:, :, lo : lo + span, :])))
            lo += span
        h = torch.cat(parts, dim=2)
        scale, shift = self.modulation(e)
        return (1.0 + scale) * h + shift


class LKCAB(nn.Module):
    """Large-kernel convolutional attention block: CAB + ConvFFN sub-blocks.

    CAB forms an attention map with a depthwise (k_f x k_t) convolution over a
    pointwise/GELU stem and gates a pointwise value branch; ConvFFN expands,
    applies an inner residual 3x3 depthwise convolution, and contracts. Both
    sub-blocks are residual and time-modulated.
    """

    def __init__(self, cfg: BCDConfig):
        super().__init__()
        c = cfg.channels
        pad = ((cfg.lk_kernel_f - 1) // 2, (cfg.lk_kernel_t - 1) // 2)
        self.cab_norm = ChannelLayerNorm(c)
        self.cab_mod = LowRankModulation(cfg.time_embed_dim, cfg.sola_rank, c, 3)
        self.cab_stem = nn.Conv2d(c, c, 1)
        self.cab_dw = nn.Conv2d(c, c, (cfg.lk_kernel_f, cfg.lk_kernel_t), padding=pad, groups=c)
        self.cab_value = nn.Conv2d(c, c, 1)
        self.cab_out = nn.Conv2d(c, c, 1)
        self.ffn_norm = ChannelLayerNorm(c)
        self.ffn_mod = LowRankModulation(cfg.time_embed_dim, cfg.sola_rank, c, 3)
        hidden = cfg.ffn_expansion * c
        self.ffn_up = nn.Conv2d(c, hidden, 1)
        self.ffn_dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.ffn_down = nn.Conv2d(hidden, c, 1)
        self.act = nn.GELU()
        for conv in (self.cab_out, self.ffn_down):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, h: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        scale, shift, gate = self.cab_mod(e)
        u = (1.0 + scale) * self.cab_norm(h) + shift
        attn = self.cab_dw(self.act(self.cab_stem(u)))
        h = h + (1.0 + gate) * self.cab_out(attn * self.cab_value(h))
        scale, shift, gate = self.ffn_mod(e)
        u = (1.0 + scale) * self.ffn_norm(h) + shift
        w = self.act(self.ffn_up(u))
        w = w + self.ffn_dw(w)
        return h + (1.0 + gate) * self.ffn_down(w)


class SubbandDecoder(nn.Module):
    """Per-region transposed convolutions restoring the full-frequency RI estimate."""

    def __init__(self, cfg: BCDConfig, out_channels: int = 2):
        super().__init__()
        self.cfg = cfg
        hidden = 2 * cfg.channels
        self.modulations = nn.ModuleList()
        self.pointwise = nn.ModuleList()
        self.norms = nn.ModuleList()
        self.deconvs = nn.ModuleList()
        for span, kf, sf, kt, st in cfg.regions:
            self.modulations.append(FullModulation(cfg.time_embed_dim, cfg.channels))
            self.pointwise.append(nn.Conv2d(cfg.channels, hidden, 1))
            self.norms.append(ChannelLayerNorm(hidden))
            self.deconvs.append(
                nn.ConvTranspose2d(hidden, out_channels, (kf, kt), (sf, st), padding=(0, (kt - 1) // 2))
            )
        self.act = nn.GELU()

    def forward(self, h: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        if h.shape[2] != self.cfg.n_subbands:
            raise ValueError(
                f"latent has {h.shape[2]} subbands, region table expects {self.cfg.n_subbands}"
            )
        outputs = []
        lo = 0
        for idx, n_sub in enumerate(self.cfg.region_subbands):
            part = h[:, :, lo : lo + n_sub, :]
            lo += n_sub
            scale, shift = self.modulations[idx](e)
            part = (1.0 + scale) * part + shift
            part = self.act(self.norms[idx](self.pointwise[idx](part)))
            outputs.append(self.deconvs[idx](part))
        return torch.cat(outputs, dim=2)


class BCD(nn.Module):
    """Data-prediction network mapping (x_t, Y, t) to an estimate of the clean spectrum."""

    def __init__(self, cfg: BCDConfig = BCDConfig()):
        super().__init__()
        self.cfg = cfg
        self.time_embed = TimeEmbedding(cfg.time_embed_dim)
        self.encoder = SubbandEncoder(cfg)
        self.blocks = nn.ModuleList(LKCAB(cfg) for _ in range(cfg.num_blocks))
        self.decoder = SubbandDecoder(cfg)

    def forward_stacked(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Run on a real (B, 4, F, L) stack, returning (B, 2, F, L) RI channels.

        F may exceed the region table by one bin (the Nyquist row), which is
        dropped on entry and written back as zero.
        """
        if x.ndim != 4 or x.shape[1] != 4:
            raise ValueError(f"expected (batch, 4, freq, frames), got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("network input contains non-finite values")
        f_net = self.cfg.net_freq_bins
        trim = x.shape[2] == f_net + 1
        if trim:
            x = x[:, :, :f_net, :]
        elif x.shape[2] != f_net:
            raise ValueError(f"input has {x.shape[2]} bins; config covers {f_net} (+1 Nyquist)")
        e = self.time_embed(t.to(x.dtype))
        h = self.encoder(x, e)
        for block in self.blocks:
            h = block(h, e)
        out = self.decoder(h, e)
        if trim:
            nyquist = out.new_zeros(out.shape[0], out.shape[1], 1, out.shape[3])
            out = torch.cat([out, nyquist], dim=2)
        return out

    def forward(self, x: torch.Tensor, y: torch.Tensor, t) -> torch.Tensor:
        """Complex API: (..., F, L) noisy state and condition, scalar or (B,) time."""
        if x.shape != y.shape:
            raise ValueError(f"state/condition shape mismatch: {x.shape} vs {y.shape}")
        batched = x.ndim == 3
        if not batched:
            x, y = x[None], y[None]
        stacked = torch.stack([x.real, x.imag, y.real, y.imag], dim=1)
        param_dtype = self.encoder.convs[0].weight.dtype
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), float(t), dtype=param_dtype, device=x.device)
        elif t.ndim == 0:
            t = t.expand(x.shape[0]).to(param_dtype)
        out = self.forward_stacked(stacked.to(param_dtype), t)
        spec = torch.complex(out[:, 0], out[:, 1]).to(x.dtype)
        return spec if batched else spec[0]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
