"""Mel filterbank, range-null decomposition, range-space surrogate, rank diagnostics.

Filterbank recipe (fixed for bit-reproducibility): HTK mel scale
(2595*log10(1 + f/700)), triangular filters on [0, f_max], no area
normalization. Pseudo-inverses and ranks come from SVD with a relative
singular-value cutoff of 1e-6.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .spectral import RAW, ComplexSpectrum

LOG_FLOOR = 1e-5
SVD_RTOL = 1e-6


@dataclass(frozen=True)
class MelFilterbank:
    """Compression matrix (F_m x F) together with its Moore-Penrose pseudo-inverse."""

    weight: torch.Tensor       # (F_m, F), nonnegative
    weight_pinv: torch.Tensor  # (F, F_m)
    sample_rate: int
    f_max: float

    @property
    def n_mels(self) -> int:
        return self.weight.shape[0]

    @property
    def n_freqs(self) -> int:
        return self.weight.shape[1]

    def project_range(self, mag: torch.Tensor) -> torch.Tensor:
        """Range-space projection A+ A applied to a magnitude array (..., F, L)."""
        a = self.weight.to(mag.dtype)
        a_pinv = self.weight_pinv.to(mag.dtype)
        return torch.einsum("fm,mg,...gl->...fl", a_pinv, a, mag)


@dataclass
class MelSpectrum:
    """Log-domain mel magnitude array (..., F_m, L)."""

    data: torch.Tensor
    sample_rate: int

    def __post_init__(self):
        if not torch.is_tensor(self.data):
            self.data = torch.as_tensor(self.data)
        if self.data.is_complex():
            raise ValueError("mel spectrum must be real-valued")
        if not torch.isfinite(self.data).all():
            raise ValueError("mel spectrum contains non-finite entries")

    @property
    def n_mels(self) -> int:
        return self.data.shape[-2]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _pinv(a: np.ndarray, rtol: float = SVD_RTOL) -> np.ndarray:
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = rtol * s.max(initial=0.0)
    inv = np.where(s > cutoff, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    return (vt.T * inv) @ u.T


def make_filterbank_from_matrix(a, sample_rate: int, f_max: float) -> MelFilterbank:
    """Wrap an arbitrary compression matrix (test shims, row subsets) with its pseudo-inverse."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("compression matrix must be 2-D")
    return MelFilterbank(
        weight=torch.from_numpy(a),
        weight_pinv=torch.from_numpy(_pinv(a)),
        sample_rate=sample_rate,
        f_max=float(f_max),
    )


def build_mel_filterbank(
    n_freqs: int, n_mels: int, sample_rate: int, f_max: float
) -> MelFilterbank:
    """Build triangular mel filters over FFT bins [0, sr/2] with band edges on [0, f_max]."""
    if n_mels >= n_freqs:
        raise ValueError(f"need n_mels < n_freqs, got {n_mels} >= {n_freqs}")
    if f_max > sample_rate / 2:
        raise ValueError(f"f_max {f_max} exceeds Nyquist {sample_rate / 2}")
    bin_freqs = np.linspace(0.0, sample_rate / 2.0, n_freqs)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(f_max), n_mels + 2))
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    up = (bin_freqs[None, :] - lower[:, None]) / (center - lower)[:, None]
    down = (upper[:, None] - bin_freqs[None, :]) / (upper - center)[:, None]
    weight = np.maximum(0.0, np.minimum(up, down))
    if (weight.sum(axis=1) == 0).any():
        empty = int(np.flatnonzero(weight.sum(axis=1) == 0)[0])
        raise ValueError(f"degenerate filterbank: filter {empty} covers no FFT bin")
    return make_filterbank_from_matrix(weight, sample_rate, f_max)


def mel_spectrum(spec: ComplexSpectrum, fb: MelFilterbank) -> MelSpectrum:
    """Log mel magnitudes: log(max(A |X|, floor))."""
    if spec.domain != RAW:
        raise ValueError("mel analysis expects a raw-domain spectrum")
    if spec.freq_bins != fb.n_freqs:
        raise ValueError(f"spectrum has {spec.freq_bins} bins, filterbank expects {fb.n_freqs}")
    mag = spec.magnitude()
    a = fb.weight.to(mag.dtype)
    data = torch.log(torch.clamp(torch.einsum("mf,...fl->...ml", a, mag), min=LOG_FLOOR))
    return MelSpectrum(data, spec.sample_rate)


def rss_surrogate(mel: MelSpectrum, fb: MelFilterbank) -> ComplexSpectrum:
    """Range-space spectral surrogate Y = A+ exp(mel) with all-zero initial phase.

    Y is real-valued and may go negative; it is kept unclamped so A Y reproduces
    exp(mel) exactly (full row rank). Signed compression handles the negatives.
    """
    if mel.n_mels != fb.n_mels:
        raise ValueError(f"mel has {mel.n_mels} bins, filterbank expects {fb.n_mels}")
    z = torch.exp(mel.data)
    a_pinv = fb.weight_pinv.to(z.dtype)
    y = torch.einsum("fm,...ml->...fl", a_pinv, z)
    return ComplexSpectrum(y, RAW, mel.sample_rate)


def matrix_rank(m, rtol: float = SVD_RTOL) -> int:
    """Number of singular values above rtol * sigma_max."""
    if torch.is_tensor(m):
        m = m.detach().cpu().numpy()
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"rank needs a nonempty 2-D matrix, got shape {m.shape}")
    s = np.linalg.svd(m, compute_uv=False)
    return int((s > rtol * s.max(initial=0.0)).sum())


def rank_difference(y_mag, x_mag, rtol: float = SVD_RTOL) -> int:
    """rank(|Y|) - rank(|X|); negative for compressive degradations."""
    y = y_mag.detach().cpu().numpy() if torch.is_tensor(y_mag) else np.asarray(y_mag)
    x = x_mag.detach().cpu().numpy() if torch.is_tensor(x_mag) else np.asarray(x_mag)
    if y.shape != x.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {x.shape}")
    return matrix_rank(y, rtol) - matrix_rank(x, rtol)


_FB_HEADER = "<IIIf"  # n_freqs, n_mels, sample_rate, f_max


def save_filterbank(path, fb: MelFilterbank) -> None:
    """Dense little-endian float32 export: header (F, F_m, sr, f_max), then A and A+."""
    with open(Path(path), "wb") as fh:
        fh.write(struct.pack(_FB_HEADER, fb.n_freqs, fb.n_mels, fb.sample_rate, fb.f_max))
        fh.write(fb.weight.numpy().astype("<f4").tobytes())
        fh.write(fb.weight_pinv.numpy().astype("<f4").tobytes())


def load_filterbank(path) -> MelFilterbank:
    blob = Path(path).read_bytes()
    head = struct.calcsize(_FB_HEADER)
    if len(blob) < head:
        raise ValueError(f"{path}: truncated filterbank file")
    n_freqs, n_mels, sr, f_max = struct.unpack(_FB_HEADER, blob[:head])
    expected = head + 4 * n_mels * n_freqs * 2
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(blob)}")
    body = np.frombuffer(blob, dtype="<f4", offset=head)
    weight = body[: n_mels * n_freqs].reshape(n_mels, n_freqs).astype(np.float64)
    pinv = body[n_mels * n_freqs :].reshape(n_freqs, n_mels).astype(np.float64)
    return MelFilterbank(torch.from_numpy(weight), torch.from_numpy(pinv), int(sr), float(f_max))


_MEL_HEADER = "<III"  # n_mels, n_frames, sample_rate


def save_mel(path, mel: MelSpectrum) -> None:
    """Little-endian float32 export of a single log-mel array with (F_m, L, sr) header."""
    data = mel.data.detach().cpu().numpy()
    if data.ndim != 2:
        raise ValueError("only single (F_m, L) mel arrays can be exported")
    with open(Path(path), "wb") as fh:
        fh.write(struct.pack(_MEL_HEADER, data.shape[0], data.shape[1], mel.sample_rate))
        fh.write(data.astype("<f4").tobytes())


def load_mel(path) -> MelSpectrum:
    blob = Path(path).read_bytes()
    head = struct.calcsize(_MEL_HEADER)
    if len(blob) < head:
        raise ValueError(f"{path}: truncated mel file")
    n_mels, n_frames, sr = struct.unpack(_MEL_HEADER, blob[:head])
    if len(blob) != head + 4 * n_mels * n_frames:
        raise ValueError(f"{path}: size does not match header ({n_mels}x{n_frames})")
    data = np.frombuffer(blob, dtype="<f4", offset=head).reshape(n_mels, n_frames)
    return MelSpectrum(torch.from_numpy(data.copy()), int(sr))
