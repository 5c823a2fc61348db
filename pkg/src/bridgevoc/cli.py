"""Command-line surface: train, distill, infer, eval, rank-analysis.

Config files are YAML with up to three sections: `train` (TrainConfig
fields), `network` (BCDConfig fields), `distill` (DistillConfig fields).
Unknown sections or keys abort at startup.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np
import torch
import yaml

from . import distill as distill_mod
from .bcd import BCDConfig
from .bridge import BridgeSchedule, SamplerConfig, make_schedule, sample
from .melrnd import (
    MelFilterbank,
    MelSpectrum,
    load_mel,
    mel_spectrum,
    rank_difference,
)
from .metrics import log_spectral_distance, multi_resolution_stft
from .spectral import COMPRESSED, ComplexSpectrum, compress, decompress, istft, load_wav, save_wav, stft
from .training import (
    DatasetManifest,
    TrainConfig,
    build_train_state,
    load_checkpoint,
    restore_train_state,
    train_loop,
)

CONFIG_SECTIONS = ("train", "network", "distill")


def load_config_file(path) -> dict:
    with open(Path(path)) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config root must be a mapping")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    return raw


def configs_from_file(path=None, seed=None) -> tuple[TrainConfig, BCDConfig, dict]:
    raw = load_config_file(path) if path else {}
    train_kwargs = dict(raw.get("train", {}))
    if seed is not None:
        train_kwargs["seed"] = seed
    train_cfg = TrainConfig.from_dict(train_kwargs)
    bcd_cfg = BCDConfig.from_dict(raw.get("network", {}))
    return train_cfg, bcd_cfg, dict(raw.get("distill", {}))


def synthesize_from_mel(
    predictor,
    mel: MelSpectrum,
    fb: MelFilterbank,
    cfg: TrainConfig,
    sampler_cfg: SamplerConfig,
    sched: BridgeSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Full restoration pipeline: mel -> surrogate -> reverse sampling -> waveform."""
    from .melrnd import rss_surrogate

    y = compress(rss_surrogate(mel, fb), cfg.compression)
    x0 = sample(predictor, y.data.to(torch.complex64), sampler_cfg, sched, generator)
    spec = ComplexSpectrum(x0, COMPRESSED, mel.sample_rate, stft_config=cfg.stft_config)
    return istft(decompress(spec, cfg.compression), cfg.stft_config)


def infer_files(
    checkpoint,
    inputs,
    out_dir,
    nfe: int = 4,
    sampler: str = "sde",
    schedule: str | None = None,
    seed: int = 0,
) -> list[Path]:
    """Run inference for each input (WAV or .mel) and write WAV files."""
    state = restore_train_state(checkpoint)
    cfg = state.config
    net = state.generator
    net.eval()
    sched = make_schedule(schedule) if schedule else state.schedule
    sampler_cfg = SamplerConfig(sampler, nfe, t_eps=sched.default_t_eps if nfe > 1 else 0.0)
    fb = cfg.build_filterbank()
    rng = torch.Generator()
    rng.manual_seed(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in inputs:
        path = Path(path)
        if path.suffix == ".mel":
            mel = load_mel(path)
            if mel.sample_rate != cfg.sample_rate or mel.n_mels != cfg.mel_bins:
                raise ValueError(
                    f"{path}: mel header ({mel.n_mels} bins @ {mel.sample_rate} Hz) does not "
                    f"match checkpoint ({cfg.mel_bins} bins @ {cfg.sample_rate} Hz)"
                )
        else:
            wave, sr = load_wav(path)
            if sr != cfg.sample_rate:
                raise ValueError(f"{path}: sample rate {sr} != model rate {cfg.sample_rate}")
            mel = mel_spectrum(stft(torch.from_numpy(wave), cfg.stft_config, sr), fb)
        with torch.no_grad():
            wave_out = synthesize_from_mel(net, mel, fb, cfg, sampler_cfg, sched, rng)
        target = out_dir / (path.stem + ".wav")
        save_wav(target, wave_out, cfg.sample_rate)
        written.append(target)
    return written


@dataclass
class EvalReport:
    """Per-file and aggregate spectral distances plus runtime statistics."""

    per_file: dict[str, dict[str, float]] = field(default_factory=dict)
    mstft_mean: float = 0.0
    lsd_mean: float | None = None
    runtime_seconds: float = 0.0

    @property
    def num_files(self) -> int:
        return len(self.per_file)

    def write_csv(self, path) -> None:
        fields = ["file", "mstft"] + (["lsd"] if self.lsd_mean is not None else [])
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            for name in sorted(self.per_file):
                row = [name, self.per_file[name]["mstft"]]
                if self.lsd_mean is not None:
                    row.append(self.per_file[name]["lsd"])
                writer.writerow(row)
            mean_row = ["mean", self.mstft_mean]
            if self.lsd_mean is not None:
                mean_row.append(self.lsd_mean)
            writer.writerow(mean_row)


def evaluate_pairs(ref_dir, gen_dir, lsd: bool = False, length_tolerance: int = 1024) -> EvalReport:
    """Pair WAV files by name and score generated against reference audio."""
    started = time.monotonic()
    ref_dir, gen_dir = Path(ref_dir), Path(gen_dir)
    refs = sorted(ref_dir.glob("*.wav"))
    if not refs:
        raise ValueError(f"no reference WAV files under {ref_dir}")
    report = EvalReport(lsd_mean=0.0 if lsd else None)
    for ref_path in refs:
        gen_path = gen_dir / ref_path.name
        if not gen_path.exists():
            raise ValueError(f"missing generated file for {ref_path.name}")
        ref, _ = load_wav(ref_path)
        gen, _ = load_wav(gen_path)
        if abs(len(ref) - len(gen)) > length_tolerance:
            raise ValueError(
                f"{ref_path.name}: length mismatch {len(ref)} vs {len(gen)} beyond tolerance"
            )
        n = min(len(ref), len(gen))
        scores = {"mstft": multi_resolution_stft(gen[:n], ref[:n])}
        if lsd:
            scores["lsd"] = log_spectral_distance(gen[:n], ref[:n])
        report.per_file[ref_path.name] = scores
    report.mstft_mean = float(np.mean([s["mstft"] for s in report.per_file.values()]))
    if lsd:
        report.lsd_mean = float(np.mean([s["lsd"] for s in report.per_file.values()]))
    report.runtime_seconds = time.monotonic() - started
    return report


def rank_histogram(paths, fb: MelFilterbank, cfg: TrainConfig) -> list[int]:
    """Rank difference of the mel range-space projection against each file's spectrum."""
    if not paths:
        raise ValueError("empty corpus")
    values = []
    for path in paths:
        wave, sr = load_wav(path)
        if sr != cfg.sample_rate:
            raise ValueError(f"{path}: sample rate {sr} != expected {cfg.sample_rate}")
        mag = stft(torch.from_numpy(wave), cfg.stft_config, sr).magnitude()
        projected = fb.project_range(mag)
        values.append(rank_difference(projected, mag))
    return values


def write_rank_histogram(path, values: list[int]) -> None:
    lo, hi = min(values), max(values)
    counts = {b: 0 for b in range(lo, hi + 1)}
    for v in values:
        counts[v] += 1
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "count"])
        for b in range(lo, hi + 1):
            writer.writerow([b, counts[b]])


@click.group()
def main():
    """Schrodinger-bridge vocoder: restore waveforms from mel features."""


@main.command("train")
@click.option("--config", type=click.Path(exists=True), default=None, help="YAML config file.")
@click.option("--data", "data_path", type=click.Path(exists=True), required=True, help="Manifest file.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Run directory.")
@click.option("--resume", type=click.Path(exists=True), default=None, help="Checkpoint to resume.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
def cmd_train(config, data_path, out_dir, resume, seed):
    """Train the diffusion vocoder on a manifest of WAV files."""
    try:
        train_cfg, bcd_cfg, _ = configs_from_file(config, seed)
        manifest = DatasetManifest.load(data_path, train_cfg.sample_rate)
        manifest.validate()
        state = build_train_state(train_cfg, bcd_cfg)
        if resume:
            load_checkpoint(resume, state)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        reports = train_loop(state, manifest, out_dir=out)
    except (ValueError, RuntimeError) as exc:
        raise click.ClickException(str(exc)) from exc
    if reports:
        click.echo(f"finished at step {reports[-1]['step']}: total={reports[-1]['total']:.4f}")
    else:
        click.echo("nothing to do: checkpoint already at total_steps")


@main.command("distill")
@click.option("--teacher", type=click.Path(exists=True), required=True, help="Teacher checkpoint.")
@click.option("--data", "data_path", type=click.Path(exists=True), required=True, help="Manifest file.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Run directory.")
@click.option("--config", type=click.Path(exists=True), default=None, help="YAML config file.")
@click.option("--steps", type=int, default=None, help="Override distillation steps.")
@click.option("--lr", type=float, default=None, help="Override student learning rate.")
@click.option("--seed", type=int, default=None, help="Override the distill seed.")
def cmd_distill(teacher, data_path, out_dir, config, steps, lr, seed):
    """Distill a single-step student from a trained teacher checkpoint."""
    try:
        raw = load_config_file(config) if config else {}
        kwargs = dict(raw.get("distill", {}))
        if steps is not None:
            kwargs["steps"] = steps
        if lr is not None:
            kwargs["lr"] = lr
        if seed is not None:
            kwargs["seed"] = seed
        distill_cfg = distill_mod.DistillConfig.from_dict(kwargs)
        state = distill_mod.load_distill_state(teacher, distill_cfg)
        manifest = DatasetManifest.load(data_path, state.train_config.sample_rate)
        manifest.validate()
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        reports = distill_mod.distill_loop(state, manifest, out_dir=out)
    except (ValueError, RuntimeError) as exc:
        raise click.ClickException(str(exc)) from exc
    if reports:
        click.echo(f"distilled {reports[-1]['step']} steps: total={reports[-1]['total']:.4f}")


@main.command("infer")
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True), required=True, help="Model checkpoint.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output directory.")
@click.option("--nfe", type=int, default=4, show_default=True, help="Reverse steps.")
@click.option("--sampler", type=click.Choice(["sde", "ode"]), default="sde", show_default=True)
@click.option("--schedule", type=click.Choice(["gmax", "vp", "ve"]), default=None,
              help="Override the checkpoint's schedule.")
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_infer(inputs, checkpoint, out_dir, nfe, sampler, schedule, seed):
    """Restore waveforms from WAV or precomputed .mel inputs."""
    try:
        written = infer_files(checkpoint, inputs, out_dir, nfe, sampler, schedule, seed)
    except (ValueError, RuntimeError) as exc:
        raise click.ClickException(str(exc)) from exc
    for path in written:
        click.echo(str(path))


@main.command("eval")
@click.argument("ref_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("gen_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", type=click.Path(), default=None, help="Report CSV path.")
@click.option("--lsd", is_flag=True, help="Also report log-spectral distance.")
def cmd_eval(ref_dir, gen_dir, out_path, lsd):
    """Score generated audio against name-matched references (multi-resolution STFT)."""
    try:
        report = evaluate_pairs(ref_dir, gen_dir, lsd=lsd)
    except (ValueError, RuntimeError) as exc:
        raise click.ClickException(str(exc)) from exc
    if out_path:
        report.write_csv(out_path)
    click.echo(f"files={report.num_files} mstft={report.mstft_mean:.6f}"
               + (f" lsd={report.lsd_mean:.4f}" if lsd else "")
               + f" runtime={report.runtime_seconds:.2f}s")


@main.command("rank-analysis")
@click.argument("corpus", type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", type=click.Path(), default=None, help="Histogram CSV path.")
@click.option("--mel-bins", type=int, default=80, show_default=True)
@click.option("--fmax", type=float, default=8000.0, show_default=True)
@click.option("--sample-rate", type=int, default=22050, show_default=True)
def cmd_rank_analysis(corpus, out_path, mel_bins, fmax, sample_rate):
    """Rank-difference histogram of the mel degradation over a WAV corpus."""
    try:
        cfg = TrainConfig(mel_bins=mel_bins, mel_fmax=fmax, sample_rate=sample_rate)
        fb = cfg.build_filterbank()
        paths = sorted(Path(corpus).glob("*.wav"))
        values = rank_histogram(paths, fb, cfg)
    except (ValueError, RuntimeError) as exc:
        raise click.ClickException(str(exc)) from exc
    if out_path:
        write_rank_histogram(out_path, values)
    arr = np.array(values)
    click.echo(
        f"files={len(values)} mean={arr.mean():.1f} min={arr.min()} max={arr.max()} "
        f"nonpositive={(arr <= 0).all()}"
    )


if __name__ == "__main__":
    main()
