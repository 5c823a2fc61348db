"""Waveform <-> complex spectrum conversion, power-law compression, and WAV I/O.

Conventions: spectra live in torch tensors whose last two axes are (freq, frame);
any leading axes are batch. The analysis window is a periodic Hann at 25% hop,
frames are centered with reflect padding, so L = 1 + floor(num_samples / hop).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

RAW = "raw"
COMPRESSED = "compressed"


class DomainError(ValueError):
    """Spectrum is in the wrong compression domain for the requested operation."""


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis parameters. Defaults: 1024 window, 256 hop, 1024 FFT."""

    window_size: int = 1024
    hop: int = 256
    fft_size: int = 1024
    window: str = "hann"

    def __post_init__(self):
        if self.window_size <= 0 or self.hop <= 0 or self.fft_size <= 0:
            raise ValueError("window_size, hop and fft_size must be positive")
        if self.hop * 4 != self.window_size:
            raise ValueError(
                f"hop must be window_size/4, got hop={self.hop} window_size={self.window_size}"
            )
        if self.fft_size < self.window_size:
            raise ValueError("fft_size must be >= window_size")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        # periodic Hann satisfies COLA at 25% hop
        return torch.hann_window(self.window_size, periodic=True, dtype=dtype, device=device)


@dataclass(frozen=True)
class CompressionConfig:
    """Power-law magnitude compression: z -> gain * |z|**exponent * unit(z)."""

    exponent: float = 0.5
    gain: float = 0.33

    def __post_init__(self):
        if not (0.0 < self.exponent <= 1.0):
            raise ValueError(f"exponent must lie in (0, 1], got {self.exponent}")
        if self.gain <= 0.0:
            raise ValueError(f"gain must be positive, got {self.gain}")


@dataclass
class ComplexSpectrum:
    """Complex time-frequency array (..., F, L) with a raw/compressed domain tag."""

    data: torch.Tensor
    domain: str
    sample_rate: int
    stft_config: StftConfig | None = None

    def __post_init__(self):
        if not torch.is_tensor(self.data):
            self.data = torch.as_tensor(self.data)
        if not self.data.is_complex():
            self.data = self.data.to(_complex_dtype(self.data.dtype))
        if self.data.ndim < 2:
            raise ValueError("spectrum must have at least (freq, frame) axes")
        if self.domain not in (RAW, COMPRESSED):
            raise ValueError(f"domain must be 'raw' or 'compressed', got {self.domain!r}")

    @property
    def freq_bins(self) -> int:
        return self.data.shape[-2]

    @property
    def num_frames(self) -> int:
        return self.data.shape[-1]

    def magnitude(self) -> torch.Tensor:
        return safe_abs(self.data)

    def phase(self) -> torch.Tensor:
        return safe_angle(self.data)


def _complex_dtype(real_dtype: torch.dtype) -> torch.dtype:
    return torch.complex128 if real_dtype == torch.float64 else torch.complex64


def _real_dtype(complex_dtype: torch.dtype) -> torch.dtype:
    return torch.float64 if complex_dtype == torch.complex128 else torch.float32


def safe_abs(z: torch.Tensor) -> torch.Tensor:
    """|z| with a finite gradient at z = 0 (plain abs backprops NaN there)."""
    if not z.is_complex():
        return z.abs()
    sq = z.real**2 + z.imag**2
    zero = (sq == 0).detach()
    return torch.sqrt(sq + zero) * ~zero


def safe_angle(z: torch.Tensor) -> torch.Tensor:
    """Phase of z in (-pi, pi], zero (with zero gradient) where z = 0."""
    if not z.is_complex():
        return torch.atan2(torch.zeros_like(z), z)
    zero = ((z.real == 0) & (z.imag == 0)).detach()
    return torch.atan2(z.imag, z.real + zero)


def _safe_unit(z: torch.Tensor) -> torch.Tensor:
    """z / |z| (exactly +-1 for real-valued entries), zero where z = 0."""
    mag = safe_abs(z)
    zero = (mag == 0).detach()
    return z / (mag + zero)


def stft(wave, cfg: StftConfig = StftConfig(), sample_rate: int = 22050) -> ComplexSpectrum:
    """Analyze a waveform into a raw-domain complex spectrum.

    `wave` is a 1-D (or batched 2-D) real sequence of at least window_size samples.
    """
    wave = torch.as_tensor(wave)
    if wave.is_complex():
        raise ValueError("waveform must be real-valued")
    if not wave.is_floating_point():
        wave = wave.to(torch.float32)
    if wave.ndim not in (1, 2):
        raise ValueError(f"waveform must be 1-D or (batch, time), got shape {tuple(wave.shape)}")
    if wave.shape[-1] < cfg.window_size:
        raise ValueError(
            f"waveform too short: {wave.shape[-1]} samples < window_size {cfg.window_size}"
        )
    if not torch.isfinite(wave).all():
        raise ValueError("waveform contains non-finite samples")
    data = torch.stft(
        wave,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop,
        win_length=cfg.window_size,
        window=cfg.window_tensor(wave.dtype, wave.device),
        center=True,
        pad_mode="reflect",
        normalized=False,
        onesided=True,
        return_complex=True,
    )
    return ComplexSpectrum(data, RAW, sample_rate, stft_config=cfg)


def istft(spec: ComplexSpectrum, cfg: StftConfig, length: int | None = None) -> torch.Tensor:
    """Synthesize a waveform from a raw-domain spectrum (overlap-add inverse)."""
    if spec.domain != RAW:
        raise DomainError("istft expects a raw-domain spectrum; decompress first")
    if spec.freq_bins != cfg.freq_bins:
        raise ValueError(
            f"spectrum has {spec.freq_bins} bins but config expects {cfg.freq_bins}"
        )
    if spec.stft_config is not None and spec.stft_config != cfg:
        raise ValueError(f"config mismatch: spectrum built with {spec.stft_config}, got {cfg}")
    real_dtype = _real_dtype(spec.data.dtype)
    return torch.istft(
        spec.data,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop,
        win_length=cfg.window_size,
        window=cfg.window_tensor(real_dtype, spec.data.device),
        center=True,
        normalized=False,
        onesided=True,
        length=length,
    )


def compress(spec: ComplexSpectrum, c: CompressionConfig = CompressionConfig()) -> ComplexSpectrum:
    """Apply power-law magnitude compression, preserving phase.

    Real-valued negative entries keep their sign (phase pi), so the range-space
    surrogate stays real after compression.
    """
    if spec.domain != RAW:
        raise DomainError("spectrum is already compressed")
    mag = safe_abs(spec.data)
    data = c.gain * mag**c.exponent * _safe_unit(spec.data)
    return replace(spec, data=data, domain=COMPRESSED)


def decompress(spec: ComplexSpectrum, c: CompressionConfig = CompressionConfig()) -> ComplexSpectrum:
    """Invert `compress`: z -> (|z|/gain)**(1/exponent) * unit(z)."""
    if spec.domain != COMPRESSED:
        raise DomainError("spectrum is not compressed")
    mag = safe_abs(spec.data)
    data = (mag / c.gain) ** (1.0 / c.exponent) * _safe_unit(spec.data)
    return replace(spec, data=data, domain=RAW)


def load_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono PCM16 or float32 WAV file; returns (float32 samples, sample rate).

    PCM16 samples are scaled by 1/32767 so save/load round-trips stay within one LSB.
    """
    path = Path(path)
    try:
        with warnings.catch_warnings():
            # scipy downgrades truncated data chunks to a warning; treat as corrupt
            warnings.simplefilter("error", wavfile.WavFileWarning)
            sr, data = wavfile.read(path)
    except Exception as exc:
        raise ValueError(f"cannot parse WAV file {path}: {exc}") from exc
    if data.ndim != 1:
        raise ValueError(f"{path}: only mono WAV is supported, got shape {data.shape}")
    if data.dtype == np.int16:
        wave = data.astype(np.float32) / 32767.0
    elif data.dtype == np.float32:
        wave = data
    else:
        raise ValueError(f"{path}: unsupported sample encoding {data.dtype}")
    return wave, int(sr)


def save_wav(path, wave, sample_rate: int, encoding: str = "float32") -> None:
    """Write a mono WAV file as IEEE float32 or PCM16."""
    if torch.is_tensor(wave):
        wave = wave.detach().cpu().numpy()
    wave = np.asarray(wave)
    if wave.ndim != 1:
        raise ValueError(f"only mono waveforms are supported, got shape {wave.shape}")
    if encoding == "float32":
        data = wave.astype(np.float32)
    elif encoding == "pcm16":
        data = np.clip(np.round(wave * 32767.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unsupported encoding {encoding!r}")
    wavfile.write(Path(path), sample_rate, data)
