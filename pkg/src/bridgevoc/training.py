"""Dataset ingestion, the diffusion-GAN training loop, optimization, checkpointing."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bcd import BCD, BCDConfig
from .bridge import BridgeSchedule, complex_noise, make_schedule, sample_xt
from .melrnd import MelFilterbank, build_mel_filterbank, mel_spectrum, rss_surrogate
from .objectives import (
    DiscriminatorBank,
    LossWeights,
    MultiResolutionMelLoss,
    adv_disc_loss,
    adv_gen_loss,
    data_loss,
    feat_match_loss,
    total_gen_loss,
)
from .spectral import (
    COMPRESSED,
    ComplexSpectrum,
    CompressionConfig,
    StftConfig,
    compress,
    decompress,
    istft,
    load_wav,
    stft,
)


class TrainingDiverged(RuntimeError):
    """Raised when a loss component becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and signal-chain hyperparameters."""

    batch_size: int = 8
    crop_frames: int = 128
    lr: float = 3e-4
    adam_betas: tuple[float, float] = (0.8, 0.99)
    weight_decay: float = 0.01
    grad_clip: float = 10.0
    total_steps: int = 1000
    seed: int = 0
    schedule: str = "gmax"
    schedule_params: dict = field(default_factory=dict)
    lambda_data: float = 1.0
    lambda_mel: float = 0.1
    lambda_adv: float = 20.0
    lambda_fm: float = 20.0
    sample_rate: int = 22050
    mel_bins: int = 80
    mel_fmax: float = 8000.0
    window_size: int = 1024
    hop: int = 256
    fft_size: int = 1024
    compress_exponent: float = 0.5
    compress_gain: float = 0.33
    log_interval: int = 10
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.crop_frames < 4 or self.total_steps < 1:
            raise ValueError("batch_size, crop_frames and total_steps must be sensible")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "schedule_params", dict(self.schedule_params))

    @property
    def stft_config(self) -> StftConfig:
        return StftConfig(self.window_size, self.hop, self.fft_size)

    @property
    def compression(self) -> CompressionConfig:
        return CompressionConfig(self.compress_exponent, self.compress_gain)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_data, self.lambda_mel, self.lambda_adv, self.lambda_fm)

    @property
    def adversarial(self) -> bool:
        return self.lambda_adv > 0 or self.lambda_fm > 0

    @property
    def segment_samples(self) -> int:
        # (crop_frames - 1) hops analyze to exactly crop_frames centered frames
        return (self.crop_frames - 1) * self.hop

    def make_schedule(self) -> BridgeSchedule:
        return make_schedule(self.schedule, **self.schedule_params)

    def build_filterbank(self) -> MelFilterbank:
        return build_mel_filterbank(
            self.stft_config.freq_bins, self.mel_bins, self.sample_rate, self.mel_fmax
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


class DatasetManifest:
    """One WAV path per line (UTF-8); relative paths resolve against the manifest."""

    def __init__(self, entries, sample_rate: int):
        self.entries = [Path(p) for p in entries]
        self.sample_rate = sample_rate
        self._cache: dict[int, np.ndarray] = {}
        if not self.entries:
            raise ValueError("manifest holds no entries")

    @classmethod
    def load(cls, path, sample_rate: int) -> "DatasetManifest":
        path = Path(path)
        base = path.parent
        lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
        entries = [base / ln if not Path(ln).is_absolute() else Path(ln) for ln in lines if ln]
        return cls(entries, sample_rate)

    def validate(self) -> None:
        """Eagerly read every file, checking mono format and sample rate."""
        for i in range(len(self.entries)):
            self.wave(i)

    def wave(self, index: int) -> np.ndarray:
        if index not in self._cache:
            wave, sr = load_wav(self.entries[index])
            if sr != self.sample_rate:
                raise ValueError(
                    f"{self.entries[index]}: sample rate {sr} != manifest rate {self.sample_rate}"
                )
            self._cache[index] = wave
        return self._cache[index]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class Batch:
    x: torch.Tensor        # compressed target spectra (B, F, L)
    y: torch.Tensor        # compressed range-space surrogates (B, F, L)
    mel: torch.Tensor      # log-mel features (B, F_m, L)
    wave: torch.Tensor     # reference waveforms (B, T)


def make_batch(
    manifest: DatasetManifest, cfg: TrainConfig, fb: MelFilterbank, rng: torch.Generator
) -> Batch:
    """Random fixed-length crops and their compressed target/surrogate spectra."""
    seg = cfg.segment_samples
    picks = torch.randint(len(manifest), (cfg.batch_size,), generator=rng)
    crops = []
    for i in picks.tolist():
        wave = manifest.wave(i)
        if len(wave) < seg:
            wave = np.pad(wave, (0, seg - len(wave)), mode="reflect")
        start = int(torch.randint(len(wave) - seg + 1, (1,), generator=rng))
        crops.append(wave[start : start + seg])
    waves = torch.from_numpy(np.stack(crops))
    raw = stft(waves, cfg.stft_config, cfg.sample_rate)
    mel = mel_spectrum(raw, fb)
    y_raw = rss_surrogate(mel, fb)
    x = compress(raw, cfg.compression)
    y = compress(y_raw, cfg.compression)
    return Batch(x=x.data, y=y.data.to(x.data.dtype), mel=mel.data, wave=waves)


def _optimizer(module: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    """Decoupled weight decay, skipping biases and norm/modulation parameters."""
    decay, no_decay = [], []
    for name, param in module.named_parameters():
        if name.endswith("bias") or "norm" in name or "mod" in name:
            no_decay.append(param)
        else:
            decay.append(param)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.adam_betas)


@dataclass
class TrainState:
    config: TrainConfig
    bcd_config: BCDConfig
    generator: BCD
    gen_opt: torch.optim.Optimizer
    discriminator: DiscriminatorBank | None
    disc_opt: torch.optim.Optimizer | None
    mel_loss: MultiResolutionMelLoss
    schedule: BridgeSchedule
    rng: torch.Generator
    step: int = 0


def build_train_state(cfg: TrainConfig, bcd_cfg: BCDConfig) -> TrainState:
    largest_time_kernel = max(
        [bcd_cfg.lk_kernel_t] + [r[3] for r in bcd_cfg.regions]
    )
    if cfg.crop_frames < largest_time_kernel:
        raise ValueError(
            f"crop_frames {cfg.crop_frames} below largest time kernel {largest_time_kernel}"
        )
    torch.manual_seed(cfg.seed)
    generator = BCD(bcd_cfg)
    disc = DiscriminatorBank() if cfg.adversarial else None
    rng = torch.Generator()
    rng.manual_seed(cfg.seed)
    return TrainState(
        config=cfg,
        bcd_config=bcd_cfg,
        generator=generator,
        gen_opt=_optimizer(generator, cfg),
        discriminator=disc,
        disc_opt=_optimizer(disc, cfg) if disc is not None else None,
        mel_loss=MultiResolutionMelLoss(cfg.sample_rate, cfg.mel_bins),
        schedule=cfg.make_schedule(),
        rng=rng,
    )


def synthesize_waveform(pred: torch.Tensor, cfg: TrainConfig, length: int) -> torch.Tensor:
    """Differentiable compressed-spectrum -> waveform tail of the generator."""
    spec = ComplexSpectrum(pred, COMPRESSED, cfg.sample_rate)
    return istft(decompress(spec, cfg.compression), cfg.stft_config, length=length)


def train_step(batch: Batch, state: TrainState) -> dict:
    """One discriminator update (when enabled) followed by one generator update."""
    cfg = state.config
    state.generator.train()
    b = batch.x.shape[0]
    t = torch.rand(b, generator=state.rng, dtype=torch.float64)  # per-example times
    noise = complex_noise(batch.x.shape, state.rng, dtype=batch.x.dtype)
    xt = sample_xt(batch.x, batch.y, t.numpy(), state.schedule, noise)
    pred = state.generator(xt.x, batch.y, t)
    gen_wave = synthesize_waveform(pred, cfg, batch.wave.shape[-1])

    disc_value = 0.0
    if cfg.adversarial:
        state.discriminator.train()
        real_scores, _ = state.discriminator(batch.wave)
        fake_scores, _ = state.discriminator(gen_wave.detach())
        d_loss = adv_disc_loss(real_scores, fake_scores)
        if not torch.isfinite(d_loss):
            raise TrainingDiverged(f"discriminator loss is {d_loss.item()} at step {state.step}")
        state.disc_opt.zero_grad()
        d_loss.backward()
        torch.nn.utils.clip_grad_norm_(state.discriminator.parameters(), cfg.grad_clip)
        state.disc_opt.step()
        disc_value = d_loss.item()

    l_data = data_loss(pred, batch.x)
    l_mel = state.mel_loss(gen_wave, batch.wave)
    if cfg.adversarial:
        fake_scores, fake_feats = state.discriminator(gen_wave)
        with torch.no_grad():
            _, real_feats = state.discriminator(batch.wave)
        l_adv = adv_gen_loss(fake_scores)
        l_fm = feat_match_loss(real_feats, fake_feats)
    else:
        l_adv = torch.zeros(())
        l_fm = torch.zeros(())
    try:
        total = total_gen_loss(l_data, l_mel, l_adv, l_fm, cfg.loss_weights)
    except ValueError as exc:
        raise TrainingDiverged(
            f"non-finite generator loss at step {state.step}: data={l_data.item()} "
            f"mel={l_mel.item()} adv={l_adv.item()} fm={l_fm.item()}"
        ) from exc
    state.gen_opt.zero_grad()
    total.backward()
    torch.nn.utils.clip_grad_norm_(state.generator.parameters(), cfg.grad_clip)
    state.gen_opt.step()
    state.step += 1
    return {
        "step": state.step,
        "total": total.item(),
        "data": l_data.item(),
        "mel": l_mel.item(),
        "adv": float(l_adv.item()),
        "fm": float(l_fm.item()),
        "disc": disc_value,
    }


def save_checkpoint(path, state: TrainState) -> None:
    payload = {
        "format": 1,
        "step": state.step,
        "train_config": state.config.to_dict(),
        "bcd_config": state.bcd_config.to_dict(),
        "generator": state.generator.state_dict(),
        "gen_opt": state.gen_opt.state_dict(),
        "discriminator": state.discriminator.state_dict() if state.discriminator else None,
        "disc_opt": state.disc_opt.state_dict() if state.disc_opt else None,
        "rng": state.rng.get_state(),
    }
    torch.save(payload, Path(path))


def _load_payload(path) -> dict:
    try:
        return torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc


def load_checkpoint(path, state: TrainState) -> int:
    """Restore parameters, optimizers and RNG into a freshly built state; returns the step."""
    payload = _load_payload(path)
    stored_cfg = BCDConfig.from_dict(payload["bcd_config"])
    if stored_cfg != state.bcd_config:
        raise ValueError(
            f"checkpoint network config {stored_cfg} does not match current {state.bcd_config}"
        )
    state.generator.load_state_dict(payload["generator"])
    state.gen_opt.load_state_dict(payload["gen_opt"])
    if payload["discriminator"] is not None:
        if state.discriminator is None:
            raise ValueError("checkpoint carries a discriminator but state has none")
        state.discriminator.load_state_dict(payload["discriminator"])
        state.disc_opt.load_state_dict(payload["disc_opt"])
    state.rng.set_state(payload["rng"])
    state.step = int(payload["step"])
    return state.step


def restore_train_state(path) -> TrainState:
    """Rebuild a full training state (configs included) from a checkpoint file."""
    payload = _load_payload(path)
    cfg = TrainConfig.from_dict(payload["train_config"])
    state = build_train_state(cfg, BCDConfig.from_dict(payload["bcd_config"]))
    load_checkpoint(path, state)
    return state


def train_loop(
    state: TrainState,
    manifest: DatasetManifest,
    out_dir=None,
    fb: MelFilterbank | None = None,
) -> list[dict]:
    """Run the configured number of steps, logging CSV rows and periodic checkpoints."""
    cfg = state.config
    fb = fb if fb is not None else cfg.build_filterbank()
    out_dir = Path(out_dir) if out_dir is not None else None
    reports = []
    log_rows = []
    while state.step < cfg.total_steps:
        batch = make_batch(manifest, cfg, fb, state.rng)
        report = train_step(batch, state)
        reports.append(report)
        if report["step"] % cfg.log_interval == 0:
            log_rows.append(report)
        if out_dir is not None and (
            report["step"] % cfg.checkpoint_interval == 0 or report["step"] == cfg.total_steps
        ):
            save_checkpoint(out_dir / f"checkpoint_{report['step']:07d}.pt", state)
            save_checkpoint(out_dir / "checkpoint_last.pt", state)
    if out_dir is not None:
        write_loss_log(out_dir / "loss_log.csv", log_rows)
    return reports


def write_loss_log(path, rows: list[dict]) -> None:
    fields = ["step", "total", "data", "mel", "adv", "fm", "disc"]
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})
