"""Reference-based spectral metrics for evaluation reports."""

from __future__ import annotations

import torch

# (fft, hop, win) triple shared with the resolution discriminators
MSTFT_RESOLUTIONS = ((1024, 120, 600), (2048, 240, 1200), (512, 50, 240))
_EPS = 1e-7


def _magnitude(wave: torch.Tensor, fft: int, hop: int, win: int) -> torch.Tensor:
    window = torch.hann_window(win, periodic=True, dtype=wave.dtype, device=wave.device)
    spec = torch.stft(wave, fft, hop, win, window=window, center=True, return_complex=True)
    return spec.abs()


def _as_wave(x) -> torch.Tensor:
    wave = torch.as_tensor(x)
    if wave.ndim != 1:
        raise ValueError(f"metric expects a mono waveform, got shape {tuple(wave.shape)}")
    return wave.to(torch.float64)


def multi_resolution_stft(gen, ref, resolutions=MSTFT_RESOLUTIONS) -> float:
    """Mean over resolutions of spectral convergence plus log-magnitude distance."""
    gen, ref = _as_wave(gen), _as_wave(ref)
    if gen.shape != ref.shape:
        raise ValueError(f"length mismatch: {gen.shape[0]} vs {ref.shape[0]}")
    total = 0.0
    for fft, hop, win in resolutions:
        if gen.shape[0] < win:
            raise ValueError(f"waveform shorter than analysis window {win}")
        mag_g = _magnitude(gen, fft, hop, win)
        mag_r = _magnitude(ref, fft, hop, win)
        sc = torch.linalg.norm(mag_r - mag_g) / torch.clamp(torch.linalg.norm(mag_r), min=_EPS)
        log_mag = (torch.log(mag_r.clamp(min=_EPS)) - torch.log(mag_g.clamp(min=_EPS))).abs().mean()
        total += float(sc + log_mag)
    return total / len(resolutions)


def log_spectral_distance(gen, ref, fft: int = 1024, hop: int = 256) -> float:
    """RMS distance between log power spectra, averaged over frames."""
    gen, ref = _as_wave(gen), _as_wave(ref)
    if gen.shape != ref.shape:
        raise ValueError(f"length mismatch: {gen.shape[0]} vs {ref.shape[0]}")
    pg = _magnitude(gen, fft, hop, fft).clamp(min=_EPS) ** 2
    pr = _magnitude(ref, fft, hop, fft).clamp(min=_EPS) ** 2
    per_frame = torch.sqrt(((10 * torch.log10(pr) - 10 * torch.log10(pg)) ** 2).mean(dim=0))
    return float(per_frame.mean())
