"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion lines.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from bridgevoc.bcd import BCD, BCDConfig
from bridgevoc.bridge import (
    SamplerConfig,
    complex_noise,
    make_schedule,
    marginal,
    reverse_sde_step,
    sample,
    sample_xt,
    DiffusionState,
)
from bridgevoc.cli import main as cli_main, synthesize_from_mel
from bridgevoc.distill import (
    DistillConfig,
    build_distill_state,
    distill_total_loss,
    distill_train_step,
    gt_consistency_loss,
    inverse_consistency_loss,
    naive_distill_loss,
    omni_distill_loss,
    omni_phase,
)
from bridgevoc.melrnd import build_mel_filterbank, matrix_rank, mel_spectrum
from bridgevoc.metrics import multi_resolution_stft
from bridgevoc.objectives import (
    LossWeights,
    adv_disc_loss,
    adv_gen_loss,
    data_loss,
    feat_match_loss,
    mel_loss,
    total_gen_loss,
)
from bridgevoc.spectral import load_wav, stft
from bridgevoc.training import (
    DatasetManifest,
    TrainConfig,
    build_train_state,
    make_batch,
    save_checkpoint,
    train_step,
)

from conftest import make_test_clip
from test_bridge import integrate_schedule
from test_cli import mstft_oracle


def report(number: int, name: str, detail: str = ""):
    suffix = f" ({detail})" if detail else ""
    print(f"\n[acceptance] criterion {number:2d} PASS - {name}{suffix}")


SMOKE_BCD = BCDConfig(
    regions=((32, 16, 16, 3, 1), (32, 16, 16, 3, 1)),
    channels=32,
    num_blocks=2,
    lk_kernel_f=5,
    lk_kernel_t=7,
    time_embed_dim=32,
    sola_rank=8,
)
SMOKE_TRAIN = TrainConfig(
    batch_size=4,
    crop_frames=128,
    total_steps=500,
    seed=11,
    lambda_adv=0.0,
    lambda_fm=0.0,
    mel_bins=16,
    window_size=128,
    hop=32,
    fft_size=128,
)


@dataclass
class OverfitRun:
    state: object
    fb: object
    clip: object
    manifest: object
    checkpoint: object
    reports: list
    runtime: float


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("smoke")
    clip = make_test_clip(tmp / "clip.wav")
    manifest = DatasetManifest([clip], 22050)
    state = build_train_state(SMOKE_TRAIN, SMOKE_BCD)
    fb = SMOKE_TRAIN.build_filterbank()
    started = time.monotonic()
    reports = []
    for _ in range(SMOKE_TRAIN.total_steps):
        reports.append(train_step(make_batch(manifest, SMOKE_TRAIN, fb, state.rng), state))
    runtime = time.monotonic() - started
    checkpoint = tmp / "teacher.pt"
    save_checkpoint(checkpoint, state)
    return OverfitRun(state, fb, clip, manifest, checkpoint, reports, runtime)


def test_criterion_01_rnd_suite():
    started = time.monotonic()
    fb = build_mel_filterbank(513, 80, 22050, 8000)
    a = fb.weight.numpy()
    a_pinv = fb.weight_pinv.numpy()
    assert np.abs(a @ a_pinv @ a - a).max() < 1e-5
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        z = rng.uniform(0.1, 5.0, (80, rng.integers(20, 120)))
        residual = np.abs(a @ (a_pinv @ z) - z).max() / np.abs(z).max()
        worst = max(worst, residual)
        assert residual < 1e-4
    runtime = time.monotonic() - started
    assert runtime < 5.0
    report(1, "range-null decomposition suite", f"worst residual {worst:.2e}, {runtime:.2f}s")


def test_criterion_02_rank_suite(tmp_path):
    started = time.monotonic()
    fb = build_mel_filterbank(513, 80, 22050, 8000)
    proj = fb.weight_pinv.numpy() @ fb.weight.numpy()
    proj_rank = matrix_rank(proj)
    rng = np.random.default_rng(1)
    violations = 0
    for _ in range(100):
        x_mag = rng.uniform(0.0, 2.0, (513, int(rng.integers(8, 64))))
        if matrix_rank(proj @ x_mag) > min(proj_rank, matrix_rank(x_mag)):
            violations += 1
    assert violations == 0

    corpus = tmp_path / "corpus"
    corpus.mkdir()
    for i in range(20):
        make_test_clip(corpus / f"{i:02d}.wav", seconds=0.25, seed=i, f0=160.0 + 15 * i)
    out_csv = tmp_path / "hist.csv"
    result = CliRunner().invoke(
        cli_main, ["rank-analysis", str(corpus), "--out", str(out_csv)]
    )
    assert result.exit_code == 0, result.output
    assert "nonpositive=True" in result.output
    rows = out_csv.read_text().strip().splitlines()[1:]
    assert sum(int(r.split(",")[1]) for r in rows) == 20
    assert all(int(r.split(",")[0]) <= 0 for r in rows if int(r.split(",")[1]) > 0)
    runtime = time.monotonic() - started
    assert runtime < 30.0
    report(2, "rank bound and rank-analysis CLI", f"0 violations, 20 clips, {runtime:.1f}s")


def test_criterion_03_schedule_suite():
    started = time.monotonic()
    times = np.linspace(0.01, 1.0, 100)
    full = np.linspace(0.0, 1.0, 100)
    for kind in ("gmax", "vp", "ve"):
        sched = make_schedule(kind)
        alpha_num, sigma_sq_num = integrate_schedule(sched, times)
        assert (np.abs(sched.alpha(times) - alpha_num) / np.abs(alpha_num)).max() < 1e-4
        assert (np.abs(sched.sigma_sq(times) - sigma_sq_num) / np.abs(sigma_sq_num)).max() < 1e-4
        identity = sched.sigma_sq(full) + sched.sigma_bar_sq(full)
        assert (np.abs(identity - sched.sigma1_sq) / sched.sigma1_sq).max() < 1e-10
    runtime = time.monotonic() - started
    assert runtime < 10.0
    report(3, "schedule closed forms vs quadrature", f"3 kinds x 100 points, {runtime:.1f}s")


def test_criterion_04_marginal_boundaries():
    rng = np.random.default_rng(2)
    x = torch.from_numpy(rng.standard_normal((16, 12)) + 1j * rng.standard_normal((16, 12)))
    y = torch.from_numpy(rng.standard_normal((16, 12)) + 1j * rng.standard_normal((16, 12)))
    for kind in ("gmax", "vp", "ve"):
        sched = make_schedule(kind)
        mean0, std0 = marginal(x, y, 0.0, sched)
        mean1, std1 = marginal(x, y, 1.0, sched)
        assert (mean0 - x).abs().max() < 1e-6
        assert (mean1 - y).abs().max() < 1e-6
        assert std0 == 0.0 and std1 == 0.0
    report(4, "marginal boundary conditions", "mean(0)=X, mean(1)=Y, std exactly 0")


def test_criterion_05_sampler_oracle_convergence():
    started = time.monotonic()
    rng = np.random.default_rng(3)
    x = torch.from_numpy(rng.standard_normal((10, 8)) + 1j * rng.standard_normal((10, 8)))
    y = torch.from_numpy(rng.standard_normal((10, 8)) + 1j * rng.standard_normal((10, 8)))
    sched = make_schedule("gmax")
    for nfe in (1, 2, 4, 16):
        out = sample(lambda a, b, t: x, y, SamplerConfig("ode", nfe=nfe), sched)
        assert (out - x).abs().max() < 1e-4

    pred_value = 0.3 * x + 0.1
    state = DiffusionState(y.clone(), 0.5, y)
    final = reverse_sde_step(state, 0.0, lambda a, b, t: pred_value, sched, torch.zeros_like(x))
    assert (final.x - pred_value).abs().max() < 1e-6

    n = 10_000
    xv, yv = 1.1 + 0.2j, -0.4 - 0.6j
    xs = torch.full((n,), xv, dtype=torch.complex128)
    ys = torch.full((n,), yv, dtype=torch.complex128)
    g = torch.Generator().manual_seed(7)
    tau, t = 0.6, 0.3
    start = sample_xt(xs, ys, tau, sched, complex_noise((n,), g, torch.complex128))
    stepped = reverse_sde_step(start, t, lambda a, b, s: xs, sched, complex_noise((n,), g, torch.complex128))
    mean, std = marginal(xs[:1], ys[:1], t, sched)
    std = float(std)
    se_mean, se_std = std / math.sqrt(n), std / math.sqrt(2 * n)
    assert abs(stepped.x.real.mean().item() - mean[0].real.item()) < 3 * se_mean
    assert abs(stepped.x.imag.mean().item() - mean[0].imag.item()) < 3 * se_mean
    assert abs(stepped.x.real.std(unbiased=True).item() - std) < 3 * se_std
    assert abs(stepped.x.imag.std(unbiased=True).item() - std) < 3 * se_std
    runtime = time.monotonic() - started
    assert runtime < 60.0
    report(5, "sampler oracle convergence", f"ODE nfe 1/2/4/16 + SDE + MC, {runtime:.1f}s")


def test_criterion_06_network_suite():
    net = BCD()
    x = torch.randn(1, 4, 513, 128)
    started = time.monotonic()
    with torch.no_grad():
        out = net.forward_stacked(x, torch.tensor([0.4]))
    forward_time = time.monotonic() - started
    assert out.shape == (1, 2, 513, 128)
    assert forward_time < 10.0

    assert BCDConfig().n_subbands == 24
    count = net.num_parameters()
    assert 7.0e6 <= count <= 8.5e6

    tiny = BCD(SMOKE_BCD).double()
    g = torch.Generator().manual_seed(6)
    with torch.no_grad():
        for p in tiny.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    inp = torch.randn(1, 4, 64, 8, generator=g, dtype=torch.float64)
    t = torch.tensor([0.37], dtype=torch.float64)
    loss = tiny.forward_stacked(inp, t).pow(2).sum()
    loss.backward()
    params = [p for p in tiny.parameters() if p.grad is not None]
    flat_grads = torch.cat([p.grad.reshape(-1) for p in params])
    live = (flat_grads.abs() > 1e-6 * flat_grads.abs().max()).nonzero().reshape(-1)
    picks = live[torch.randperm(len(live), generator=g)[:20]]
    offsets = np.cumsum([0] + [p.numel() for p in params])
    h = 1e-6
    worst = 0.0
    for flat_idx in picks.tolist():
        p_idx = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        local = flat_idx - offsets[p_idx]
        param = params[p_idx]
        with torch.no_grad():
            orig = param.reshape(-1)[local].item()
            param.reshape(-1)[local] = orig + h
            up = tiny.forward_stacked(inp, t).pow(2).sum().item()
            param.reshape(-1)[local] = orig - h
            down = tiny.forward_stacked(inp, t).pow(2).sum().item()
            param.reshape(-1)[local] = orig
        fd = (up - down) / (2 * h)
        ag = flat_grads[flat_idx].item()
        rel = abs(fd - ag) / max(abs(fd), abs(ag))
        worst = max(worst, rel)
        assert rel < 1e-2
    report(
        6,
        "network suite",
        f"forward {forward_time:.2f}s, params {count/1e6:.3f}M "
        f"(paper reports 7.65M and 7.97M), grad rel err {worst:.1e}",
    )


def test_criterion_07_loss_suite():
    rng = np.random.default_rng(4)
    x = torch.from_numpy(rng.standard_normal((8, 6)) + 1j * rng.standard_normal((8, 6)))
    assert data_loss(x, x).item() == 0.0
    assert data_loss(x + 1.0, x).item() == pytest.approx(1.0, abs=1e-12)

    wave = torch.from_numpy(rng.standard_normal(8192))
    assert mel_loss(wave, wave).item() == 0.0
    assert mel_loss(-wave, wave).item() == pytest.approx(0.0, abs=1e-9)

    assert adv_gen_loss([torch.full((4,), 1.5)]).item() == 0.0
    assert adv_gen_loss([torch.zeros(4)]).item() == 1.0
    assert adv_gen_loss([torch.full((4,), -1.0)]).item() == 2.0
    assert adv_disc_loss([torch.ones(3)], [torch.full((3,), -1.0)]).item() == 0.0
    assert adv_disc_loss([torch.zeros(3)], [torch.zeros(3)]).item() == 2.0
    assert adv_disc_loss([torch.full((3,), -1.0)], [torch.ones(3)]).item() == 4.0

    feats = [[torch.from_numpy(rng.standard_normal((3, 4)))] for _ in range(2)]
    assert feat_match_loss(feats, feats).item() == 0.0
    shifted = [[f + 2.0 for f in fs] for fs in feats]
    assert feat_match_loss(feats, shifted).item() == pytest.approx(2.0, abs=1e-12)

    # naive-loop oracle agreements
    a = torch.from_numpy(rng.standard_normal((5, 4)) + 1j * rng.standard_normal((5, 4)))
    b = torch.from_numpy(rng.standard_normal((5, 4)) + 1j * rng.standard_normal((5, 4)))
    oracle = float(np.mean(np.abs((a - b).numpy()) ** 2))
    assert abs(data_loss(a, b).item() - oracle) < 1e-8
    assert abs(naive_distill_loss(a, b).item() - oracle) < 1e-8
    real = [[torch.from_numpy(rng.standard_normal((3, 4))) for _ in range(2)] for _ in range(3)]
    fake = [[torch.from_numpy(rng.standard_normal((3, 4))) for _ in range(2)] for _ in range(3)]
    fm_oracle = np.mean(
        [np.mean([np.abs((r - f).numpy()).mean() for r, f in zip(rs, fs)]) for rs, fs in zip(real, fake)]
    )
    assert abs(feat_match_loss(real, fake).item() - fm_oracle) < 1e-8

    assert total_gen_loss(1.0, 1.0, 1.0, 1.0).item() == pytest.approx(41.1, abs=1e-9)
    assert distill_total_loss(1, 1, 1, 1, 1, 1).item() == pytest.approx(43.1, abs=1e-9)
    w = LossWeights()
    base = total_gen_loss(1.0, 2.0, 3.0, 4.0, w).item()
    for idx, weight in enumerate((w.data, w.mel, w.adv, w.fm)):
        bumped = [1.0, 2.0, 3.0, 4.0]
        bumped[idx] += 1.0
        assert total_gen_loss(*bumped, w).item() == pytest.approx(base + weight, rel=1e-9)

    # distill fixed points
    assert omni_distill_loss(a, a).item() == 0.0
    student_identity = lambda s, y, t: s
    assert gt_consistency_loss(student_identity, b, a).item() == 0.0
    source = torch.zeros_like(a)
    student_inverse = lambda s, y, t: source
    assert inverse_consistency_loss(student_inverse, None, b, source, teacher_output=b).item() == 0.0
    report(7, "loss fixed points, oracles, linearity")


def test_criterion_08_omni_suite():
    phi = torch.full((16, 12), 1.234, dtype=torch.float64)
    out = omni_phase(phi)
    assert torch.equal(out[0], phi)
    assert torch.all(out[1:] == 0)

    delta = 0.01
    ramp = (torch.arange(24, dtype=torch.float64) * delta)[None, :].repeat(10, 1)
    interior = omni_phase(ramp)[:, 1:-1, 1:-1]
    for ch in range(1, 9):
        vals = torch.round(interior[ch] / delta)
        assert set(torch.unique(vals).tolist()).issubset({-1.0, 0.0, 1.0})
        assert torch.allclose(interior[ch], vals * delta, atol=1e-12)

    rng = np.random.default_rng(5)
    rand_phi = rng.uniform(-np.pi, np.pi, (10, 9))
    got = omni_phase(torch.from_numpy(rand_phi)).numpy()
    padded = np.pad(rand_phi, 1, mode="reflect")
    offsets = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
    oracle = np.zeros((9, 10, 9))
    oracle[0] = rand_phi
    for c, (di, dj) in enumerate(offsets, start=1):
        for i in range(10):
            for j in range(9):
                d = rand_phi[i, j] - padded[1 + i + di, 1 + j + dj]
                oracle[c, i, j] = math.atan2(math.sin(d), math.cos(d))
    assert np.abs(got - oracle).max() < 1e-10
    report(8, "omnidirectional phase suite", "annihilation exact, ramp exact, oracle < 1e-10")


def test_criterion_09_overfit_smoke(overfit_run):
    first = overfit_run.reports[0]["mel"]
    last = overfit_run.reports[-1]["mel"]
    assert last <= 0.5 * first, f"mel {first:.3f} -> {last:.3f}"
    assert overfit_run.runtime < 600.0
    report(
        9,
        "overfit smoke",
        f"mel {first:.3f} -> {last:.3f} ({last / first:.1%}), {overfit_run.runtime:.0f}s",
    )


def test_criterion_10_distill_smoke(overfit_run):
    started = time.monotonic()
    cfg = DistillConfig(steps=200, lr=8e-5, teacher_nfe=16, lambda_adv=0.0, lambda_fm=0.0, seed=5)
    dstate = build_distill_state(overfit_run.state, cfg)
    reports = []
    for _ in range(cfg.steps):
        batch = make_batch(overfit_run.manifest, SMOKE_TRAIN, overfit_run.fb, dstate.rng)
        reports.append(distill_train_step(batch, dstate))
    assert reports[-1]["total"] < reports[0]["total"]

    wave, sr = load_wav(overfit_run.clip)
    ref = torch.from_numpy(wave)
    mel = mel_spectrum(stft(ref, SMOKE_TRAIN.stft_config, sr), overfit_run.fb)
    with torch.no_grad():
        teacher_wave = synthesize_from_mel(
            overfit_run.state.generator, mel, overfit_run.fb, SMOKE_TRAIN,
            SamplerConfig("ode", nfe=4), dstate.schedule,
        )
        student_wave = synthesize_from_mel(
            dstate.student, mel, overfit_run.fb, SMOKE_TRAIN,
            SamplerConfig("ode", nfe=1), dstate.schedule,
        )
    n = min(len(ref), len(teacher_wave), len(student_wave))
    teacher_score = multi_resolution_stft(teacher_wave[:n], ref[:n])
    student_score = multi_resolution_stft(student_wave[:n], ref[:n])
    assert student_score <= 1.5 * teacher_score
    runtime = time.monotonic() - started
    assert runtime < 300.0
    report(
        10,
        "distillation smoke",
        f"total {reports[0]['total']:.3f} -> {reports[-1]['total']:.3f}, "
        f"student@1 {student_score:.3f} vs teacher@4 {teacher_score:.3f}, {runtime:.0f}s",
    )


def test_criterion_11_end_to_end_determinism(tmp_path, overfit_run):
    runner = CliRunner()
    outputs = []
    for tag in ("a", "b"):
        out_dir = tmp_path / tag
        result = runner.invoke(
            cli_main,
            [
                "infer", str(overfit_run.clip),
                "--checkpoint", str(overfit_run.checkpoint),
                "--out", str(out_dir),
                "--nfe", "4",
                "--sampler", "ode",
                "--seed", "7",
            ],
        )
        assert result.exit_code == 0, result.output
        outputs.append((out_dir / "clip.wav").read_bytes())
    assert outputs[0] == outputs[1]
    report(11, "end-to-end determinism", f"byte-identical WAV ({len(outputs[0])} bytes)")


def test_criterion_12_mstft_self_test():
    rng = np.random.default_rng(6)
    wave = rng.standard_normal(8192)
    assert multi_resolution_stft(wave, wave) == 0.0
    worst = 0.0
    for _ in range(10):
        gen = rng.standard_normal(4096)
        ref = rng.standard_normal(4096)
        got = multi_resolution_stft(gen, ref)
        oracle = mstft_oracle(gen, ref)
        worst = max(worst, abs(got - oracle))
        assert abs(got - oracle) < 1e-6
    report(12, "multi-resolution STFT self-test", f"oracle gap {worst:.1e}")
