import numpy as np
import pytest
import torch

from bridgevoc.spectral import (
    ComplexSpectrum,
    CompressionConfig,
    DomainError,
    StftConfig,
    compress,
    decompress,
    istft,
    load_wav,
    save_wav,
    stft,
)

CFG = StftConfig()


def reflect_pad_frames(wave: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Centered analysis frames (windowed), the same framing stft uses."""
    pad = cfg.fft_size // 2
    padded = np.concatenate([wave[1 : pad + 1][::-1], wave, wave[-pad - 1 : -1][::-1]])
    n_frames = 1 + len(wave) // cfg.hop
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.window_size) / cfg.window_size)
    frames = np.stack(
        [padded[m * cfg.hop : m * cfg.hop + cfg.window_size] * window for m in range(n_frames)]
    )
    return frames


def dft_oracle(wave: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Brute-force DFT of each centered windowed frame."""
    frames = reflect_pad_frames(wave, cfg)
    n = np.arange(cfg.fft_size)
    k = np.arange(cfg.freq_bins)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / cfg.fft_size)
    return basis @ frames.T.astype(np.complex128)


class TestStft:
    def test_zero_wave(self):
        spec = stft(torch.zeros(1024), CFG)
        assert spec.data.shape == (513, 5)
        assert torch.all(spec.data == 0)
        assert spec.domain == "raw"

    def test_impulse_flat_first_frame(self):
        wave = torch.zeros(2048)
        wave[0] = 1.0
        spec = stft(wave, CFG)
        mag0 = spec.data[:, 0].abs()
        assert torch.allclose(mag0, torch.ones(513), atol=1e-5)

    def test_sine_matches_brute_force_dft(self):
        sr = 22050
        t = np.arange(sr) / sr
        freq = 64 * sr / CFG.fft_size  # bin-center frequency
        wave = np.sin(2 * np.pi * freq * t)
        spec = stft(torch.from_numpy(wave), CFG, sample_rate=sr)
        oracle = dft_oracle(wave, CFG)
        err = np.abs(spec.data.numpy() - oracle).max()
        assert err < 1e-6
        mags = np.abs(spec.data.numpy())
        assert np.all(mags.argmax(axis=0)[2:-2] == 64)

    def test_frame_count(self):
        for n in (1024, 5000, 22050):
            spec = stft(torch.randn(n), CFG)
            assert spec.num_frames == 1 + n // CFG.hop

    def test_short_wave_rejected(self):
        with pytest.raises(ValueError, match="too short"):
            stft(torch.zeros(100), CFG)
        with pytest.raises(ValueError):
            stft(torch.zeros(0), CFG)

    def test_nonfinite_rejected(self):
        wave = torch.zeros(2048)
        wave[7] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            stft(wave, CFG)

    def test_parseval_per_frame(self):
        rng = np.random.default_rng(0)
        wave = rng.standard_normal(8192)
        spec = stft(torch.from_numpy(wave), CFG).data.numpy()
        frames = reflect_pad_frames(wave, CFG)
        frame_energy = (frames**2).sum(axis=1)
        spec_energy = (
            np.abs(spec[0]) ** 2 + np.abs(spec[-1]) ** 2 + 2 * (np.abs(spec[1:-1]) ** 2).sum(axis=0)
        ) / CFG.fft_size
        rel = np.abs(spec_energy - frame_energy) / frame_energy.max()
        assert rel.max() < 1e-4


class TestIstft:
    def test_zero_spectrum(self):
        spec = ComplexSpectrum(torch.zeros(513, 9, dtype=torch.complex64), "raw", 22050)
        wave = istft(spec, CFG)
        assert torch.all(wave == 0)

    def test_round_trip_white_noise(self):
        rng = np.random.default_rng(3)
        wave = torch.from_numpy(rng.standard_normal(22050))
        rec = istft(stft(wave, CFG), CFG, length=len(wave))
        interior = slice(CFG.window_size, -CFG.window_size)
        assert (rec[interior] - wave[interior]).abs().max() < 1e-5

    def test_round_trip_float32(self):
        rng = np.random.default_rng(4)
        wave = torch.from_numpy(rng.standard_normal(8192).astype(np.float32))
        rec = istft(stft(wave, CFG), CFG, length=len(wave))
        interior = slice(CFG.window_size, -CFG.window_size)
        assert (rec[interior] - wave[interior]).abs().max() < 1e-5

    def test_mismatched_config_rejected(self):
        spec = stft(torch.randn(4096), CFG)
        other = StftConfig(window_size=512, hop=128, fft_size=1024)  # same F, different hop
        assert other.freq_bins == CFG.freq_bins
        with pytest.raises(ValueError, match="mismatch"):
            istft(spec, other)

    def test_compressed_rejected(self):
        spec = compress(stft(torch.randn(4096), CFG))
        with pytest.raises(DomainError):
            istft(spec, CFG)

    def test_wrong_bin_count_rejected(self):
        spec = ComplexSpectrum(torch.zeros(257, 9, dtype=torch.complex64), "raw", 22050)
        with pytest.raises(ValueError, match="bins"):
            istft(spec, CFG)


class TestCompression:
    def test_known_values(self):
        data = torch.tensor([[4.0 + 0.0j, 0.0 + 0.0j, -4.0 + 0.0j]]).reshape(3, 1)
        spec = ComplexSpectrum(data, "raw", 22050)
        comp = compress(spec, CompressionConfig(0.5, 0.33))
        expected = torch.tensor([0.66 + 0.0j, 0.0 + 0.0j, -0.66 + 0.0j]).reshape(3, 1)
        assert torch.allclose(comp.data, expected, atol=1e-7)
        assert comp.domain == "compressed"

    def test_inverse_of_known_values(self):
        data = torch.tensor([0.66 + 0.0j, 0.0 + 0.0j, -0.66 + 0.0j]).reshape(3, 1)
        spec = ComplexSpectrum(data, "compressed", 22050)
        raw = decompress(spec, CompressionConfig(0.5, 0.33))
        expected = torch.tensor([4.0 + 0.0j, 0.0 + 0.0j, -4.0 + 0.0j]).reshape(3, 1)
        assert torch.allclose(raw.data, expected, atol=1e-5)

    @pytest.mark.parametrize("exponent,gain", [(0.5, 0.33), (0.3, 1.0), (1.0, 0.5)])
    def test_round_trip_random(self, exponent, gain):
        rng = np.random.default_rng(5)
        data = torch.from_numpy(
            rng.standard_normal((64, 16)) + 1j * rng.standard_normal((64, 16))
        )
        spec = ComplexSpectrum(data, "raw", 22050)
        c = CompressionConfig(exponent, gain)
        back = decompress(compress(spec, c), c)
        assert (back.data - data).abs().max() < 1e-6
        fwd = compress(decompress(ComplexSpectrum(data, "compressed", 22050), c), c)
        assert (fwd.data - data).abs().max() < 1e-6

    def test_double_compression_rejected(self):
        spec = ComplexSpectrum(torch.ones(4, 4, dtype=torch.complex64), "raw", 22050)
        comp = compress(spec)
        with pytest.raises(DomainError):
            compress(comp)
        with pytest.raises(DomainError):
            decompress(spec)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            CompressionConfig(exponent=0.0)
        with pytest.raises(ValueError):
            CompressionConfig(exponent=1.5)
        with pytest.raises(ValueError):
            CompressionConfig(gain=-1.0)

    def test_signed_values_stay_real(self):
        rng = np.random.default_rng(6)
        data = torch.from_numpy(rng.standard_normal((32, 8)))  # real, mixed sign
        comp = compress(ComplexSpectrum(data, "raw", 22050))
        assert torch.all(comp.data.imag == 0)
        assert torch.equal(torch.sign(comp.data.real), torch.sign(data))


class TestWavIO:
    def test_float32_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        wave = (rng.standard_normal(4096) * 0.3).astype(np.float32)
        path = tmp_path / "f32.wav"
        save_wav(path, wave, 22050, encoding="float32")
        loaded, sr = load_wav(path)
        assert sr == 22050
        assert np.array_equal(loaded, wave)

    def test_pcm16_round_trip_one_lsb(self, tmp_path):
        rng = np.random.default_rng(8)
        wave = (rng.standard_normal(4096) * 0.3).clip(-1, 1).astype(np.float32)
        path = tmp_path / "p16.wav"
        save_wav(path, wave, 24000, encoding="pcm16")
        loaded, sr = load_wav(path)
        assert sr == 24000
        assert np.abs(loaded - wave).max() <= 1.0 / 32767

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "good.wav"
        save_wav(path, np.zeros(1024, dtype=np.float32), 22050)
        blob = path.read_bytes()
        bad = tmp_path / "bad.wav"
        bad.write_bytes(blob[: len(blob) // 3])
        with pytest.raises(ValueError, match="cannot parse"):
            load_wav(bad)

    def test_multichannel_rejected(self, tmp_path):
        from scipy.io import wavfile

        path = tmp_path / "stereo.wav"
        wavfile.write(path, 22050, np.zeros((256, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="mono"):
            load_wav(path)

    def test_unsupported_encoding_rejected(self, tmp_path):
        from scipy.io import wavfile

        path = tmp_path / "i32.wav"
        wavfile.write(path, 22050, np.zeros(256, dtype=np.int32))
        with pytest.raises(ValueError, match="unsupported"):
            load_wav(path)

    def test_torch_input(self, tmp_path):
        path = tmp_path / "t.wav"
        save_wav(path, torch.zeros(1024), 22050)
        loaded, _ = load_wav(path)
        assert loaded.shape == (1024,)


class TestStftConfig:
    def test_hop_must_be_quarter_window(self):
        with pytest.raises(ValueError, match="window_size/4"):
            StftConfig(window_size=1024, hop=512, fft_size=1024)

    def test_fft_not_smaller_than_window(self):
        with pytest.raises(ValueError):
            StftConfig(window_size=1024, hop=256, fft_size=512)

    def test_freq_bins(self):
        assert CFG.freq_bins == 513
        assert StftConfig(128, 32, 128).freq_bins == 65
