"""Generator losses and the multi-period / multi-resolution discriminators.

Reductions: every loss is a mean over its elements (per discriminator, per
feature map), then averaged across sub-discriminators; multi-resolution terms
sum over resolutions of per-resolution means.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import nn

from .melrnd import LOG_FLOOR, build_mel_filterbank

MPD_PERIODS = (2, 3, 5, 7, 11)
MRD_RESOLUTIONS = ((1024, 120, 600), (2048, 240, 1200), (512, 50, 240))
# (fft, hop, mel bins); None picks up the pipeline's mel bin count
MEL_LOSS_RESOLUTIONS = ((512, 128, 40), (1024, 256, None), (2048, 512, 160))


@dataclass(frozen=True)
class LossWeights:
    data: float = 1.0
    mel: float = 0.1
    adv: float = 20.0
    fm: float = 20.0

    def __post_init__(self):
        for name in ("data", "mel", "adv", "fm"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


def data_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared complex distance between spectra of equal shape."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    if diff.is_complex():
        return (diff.real**2 + diff.imag**2).mean()
    return (diff**2).mean()


def _as_batch(wave: torch.Tensor) -> torch.Tensor:
    wave = torch.as_tensor(wave)
    if wave.ndim == 1:
        wave = wave[None]
    if wave.ndim != 2:
        raise ValueError(f"waveform must be (time,) or (batch, time), got {tuple(wave.shape)}")
    return wave


class MultiResolutionMelLoss(nn.Module):
    """Sum over STFT resolutions of the mean absolute log-mel difference."""

    def __init__(self, sample_rate: int, mel_bins: int, resolutions=MEL_LOSS_RESOLUTIONS):
        super().__init__()
        self.sample_rate = sample_rate
        self.resolutions = tuple(
            (fft, hop, bins if bins is not None else mel_bins) for fft, hop, bins in resolutions
        )
        for idx, (fft, hop, bins) in enumerate(self.resolutions):
            fb = build_mel_filterbank(fft // 2 + 1, bins, sample_rate, sample_rate / 2)
            self.register_buffer(f"weight_{idx}", fb.weight.float(), persistent=False)

    def _log_mel(self, wave: torch.Tensor, idx: int) -> torch.Tensor:
        fft, hop, _ = self.resolutions[idx]
        window = torch.hann_window(fft, periodic=True, dtype=wave.dtype, device=wave.device)
        spec = torch.stft(
            wave, fft, hop, window=window, center=True, pad_mode="reflect", return_complex=True
        )
        mag = torch.sqrt(spec.real**2 + spec.imag**2 + 1e-14)
        weight = getattr(self, f"weight_{idx}").to(wave.dtype)
        return torch.log(torch.clamp(torch.einsum("mf,bfl->bml", weight, mag), min=LOG_FLOOR))

    def forward(self, gen_wave: torch.Tensor, ref_wave: torch.Tensor) -> torch.Tensor:
        gen, ref = _as_batch(gen_wave), _as_batch(ref_wave)
        if gen.shape != ref.shape:
            raise ValueError(f"length mismatch: {gen.shape} vs {ref.shape}")
        total = gen.new_zeros(())
        for idx in range(len(self.resolutions)):
            total = total + (self._log_mel(gen, idx) - self._log_mel(ref, idx)).abs().mean()
        return total


@lru_cache(maxsize=8)
def _cached_mel_loss(sample_rate: int, mel_bins: int) -> MultiResolutionMelLoss:
    return MultiResolutionMelLoss(sample_rate, mel_bins)


def mel_loss(gen_wave, ref_wave, sample_rate: int = 22050, mel_bins: int = 80) -> torch.Tensor:
    """Functional form of MultiResolutionMelLoss with cached filterbanks."""
    return _cached_mel_loss(sample_rate, mel_bins)(gen_wave, ref_wave)


def adv_gen_loss(disc_scores: list[torch.Tensor]) -> torch.Tensor:
    """Hinge generator loss, averaged over sub-discriminators and score elements."""
    if not disc_scores:
        raise ValueError("empty discriminator bank")
    terms = [F.relu(1.0 - s).mean() for s in disc_scores]
    return torch.stack(terms).mean()


def adv_disc_loss(real_scores: list[torch.Tensor], fake_scores: list[torch.Tensor]) -> torch.Tensor:
    """Hinge discriminator loss mirroring the generator hinge."""
    if not real_scores or len(real_scores) != len(fake_scores):
        raise ValueError(
            f"score list mismatch: {len(real_scores)} real vs {len(fake_scores)} fake"
        )
    terms = [
        F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean()
        for r, f in zip(real_scores, fake_scores)
    ]
    return torch.stack(terms).mean()


def feat_match_loss(real_feats, fake_feats) -> torch.Tensor:
    """Mean absolute distance between intermediate features, averaged over layers then banks."""
    if len(real_feats) != len(fake_feats) or not real_feats:
        raise ValueError("feature structure mismatch across discriminators")
    per_disc = []
    for real, fake in zip(real_feats, fake_feats):
        if len(real) != len(fake):
            raise ValueError("feature structure mismatch within a discriminator")
        layer_terms = []
        for r, f in zip(real, fake):
            if r.shape != f.shape:
                raise ValueError(f"feature shape mismatch: {r.shape} vs {f.shape}")
            layer_terms.append((r - f).abs().mean())
        per_disc.append(torch.stack(layer_terms).mean())
    return torch.stack(per_disc).mean()


def total_gen_loss(data, mel, adv, fm, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted sum of the four generator components."""
    components = [torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
                  for v in (data, mel, adv, fm)]
    for value in components:
        if not torch.isfinite(value):
            raise ValueError("non-finite loss component")
    data, mel, adv, fm = components
    return weights.data * data + weights.mel * mel + weights.adv * adv + weights.fm * fm


def _is_prime(n: int) -> bool:
    return n >= 2 and all(n % d for d in range(2, int(n**0.5) + 1))


class PeriodDiscriminator(nn.Module):
    """2-D convolutions over the waveform folded at a fixed period."""

    def __init__(self, period: int, channels=(16, 64, 128, 128)):
        super().__init__()
        self.period = period
        convs = []
        in_ch = 1
        for i, out_ch in enumerate(channels):
            stride = (3, 1) if i < len(channels) - 1 else (1, 1)
            convs.append(nn.Conv2d(in_ch, out_ch, (5, 1), stride, padding=(2, 0)))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.post = nn.Conv2d(in_ch, 1, (3, 1), padding=(1, 0))

    def forward(self, wave: torch.Tensor):
        b, t = wave.shape
        if t < self.period:
            raise ValueError(f"waveform ({t} samples) shorter than period {self.period}")
        if t % self.period:
            wave = F.pad(wave, (0, self.period - t % self.period), mode="reflect")
        x = wave.reshape(b, 1, -1, self.period)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.1)
            feats.append(x)
        score = self.post(x)
        feats.append(score)
        return score, feats


class ResolutionDiscriminator(nn.Module):
    """2-D convolutions over a magnitude spectrogram at one STFT resolution."""

    def __init__(self, fft: int, hop: int, win: int, channels: int = 32):
        super().__init__()
        self.fft, self.hop, self.win = fft, hop, win
        c = channels
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(1, c, (3, 9), padding=(1, 4)),
                nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4)),
                nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4)),
                nn.Conv2d(c, c, (3, 3), padding=(1, 1)),
            ]
        )
        self.post = nn.Conv2d(c, 1, (3, 3), padding=(1, 1))

    def forward(self, wave: torch.Tensor):
        if wave.shape[-1] < self.win:
            raise ValueError(f"waveform ({wave.shape[-1]} samples) shorter than window {self.win}")
        window = torch.hann_window(self.win, periodic=True, dtype=wave.dtype, device=wave.device)
        spec = torch.stft(
            wave, self.fft, self.hop, self.win, window=window, center=True, return_complex=True
        )
        x = torch.sqrt(spec.real**2 + spec.imag**2 + 1e-14)[:, None]
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.1)
            feats.append(x)
        score = self.post(x)
        feats.append(score)
        return score, feats


class DiscriminatorBank(nn.Module):
    """All period and resolution sub-discriminators behind one forward call."""

    def __init__(self, periods=MPD_PERIODS, resolutions=MRD_RESOLUTIONS):
        super().__init__()
        periods = tuple(periods)
        if len(set(periods)) != len(periods) or not all(_is_prime(p) for p in periods):
            raise ValueError(f"periods must be distinct primes, got {periods}")
        self.mpd = nn.ModuleList(PeriodDiscriminator(p) for p in periods)
        self.mrd = nn.ModuleList(ResolutionDiscriminator(*r) for r in resolutions)

    @property
    def num_discriminators(self) -> int:
        return len(self.mpd) + len(self.mrd)

    def mpd_forward(self, wave):
        wave = _as_batch(wave)
        results = [d(wave) for d in self.mpd]
        return [s for s, _ in results], [f for _, f in results]

    def mrd_forward(self, wave):
        wave = _as_batch(wave)
        results = [d(wave) for d in self.mrd]
        return [s for s, _ in results], [f for _, f in results]

    def forward(self, wave):
        wave = _as_batch(wave)
        if not torch.isfinite(wave).all():
            raise ValueError("waveform contains non-finite samples")
        mpd_scores, mpd_feats = self.mpd_forward(wave)
        mrd_scores, mrd_feats = self.mrd_forward(wave)
        return mpd_scores + mrd_scores, mpd_feats + mrd_feats
