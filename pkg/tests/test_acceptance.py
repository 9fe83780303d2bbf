"""Acceptance suite: one PASS/FAIL line per criterion (see the terminal summary).

The desk-scale experiment runs the full pipeline for three seeds, which takes
most of half an hour on one core; deselect it with ``-m "not slow"``.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.signal import resample
from threadpoolctl import threadpool_limits

from oracles import brute_force_rir, direct_convolution, infonce, naive_dft, numeric_grad, rel_error
from revrir import pipeline
from revrir.catalog import RoomSpec, RoomType
from revrir.config import RunConfig, preset
from revrir.contrastive import DualEncoder, EmbeddingBatch, EncoderConfig, contrastive_loss, smdp
from revrir.dsp import convolve_arrays, fft_real
from revrir.nn import (
    AdamW,
    BatchNorm1d,
    Dropout,
    Linear,
    LrSchedule,
    ReLU,
    Tensor,
    ff_block,
    l2_normalize,
    lr_at,
    softmax_cross_entropy,
)
from revrir.simulate import AcousticConfig, Placement, generate_rir, read_bank, sample_placement
from revrir.tasks import feature_matrix

DESK_SEEDS = (1, 2, 3)
DETERMINISM_SEED = DESK_SEEDS[0]


def unit_rows(rng, b, d):
    x = rng.standard_normal((b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# --- DSP oracles --------------------------------------------------------------------


def test_dsp_oracles(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for n in (1, 2, 4, 8, 16, 32, 64):
        for length in sorted({1, n // 2 or 1, n}):
            x = rng.standard_normal(length)
            worst = max(worst, np.max(np.abs(fft_real(x, n) - naive_dft(x, n))))
    for la, lb in ((1, 1), (3, 17), (100, 31), (1024, 1024), (1000, 1)):
        a, b = rng.standard_normal(la), rng.standard_normal(lb)
        worst = max(worst, np.max(np.abs(convolve_arrays(a, b) - direct_convolution(a, b))))
    elapsed = time.perf_counter() - start
    criterion("DSP oracles: FFT and convolution within 1e-9, < 10 s", worst < 1e-9 and elapsed < 10,
              f"max err {worst:.2e}, {elapsed:.1f} s")


# --- image-source oracle --------------------------------------------------------------


def test_image_source_oracle(criterion):
    start = time.perf_counter()
    room = RoomSpec(0, RoomType.SMALL, 3500, 4500, 3000)
    rng = np.random.default_rng(1)
    oracle_err = 0.0
    for betas in (np.full(6, 0.89), np.array([0.9, 0.7, 0.5, 0.85, 0.3, 0.6])):
        for _ in range(3):
            p = sample_placement(room, rng)
            got = generate_rir(room, p, AcousticConfig(max_image_order=2), beta=tuple(betas)).samples
            ref = brute_force_rir(room.dims, p.source, p.microphone, betas, 8000, 343.0, 4096, 2)
            oracle_err = max(oracle_err, np.max(np.abs(got - ref)))

    arrival_off = peak_err = 0.0
    free = AcousticConfig(beta=0.0)
    for _ in range(50):
        p = sample_placement(room, rng)
        d = p.distance
        h = generate_rir(room, p, AcousticConfig(), beta=0.89).samples
        # arrival: first sample reaching half the direct-path amplitude
        first = int(np.argmax(np.abs(h) >= 0.5 / (4 * math.pi * d)))
        arrival_off = max(arrival_off, abs(first - round(8000 * d / 343)))
        # band-limited peak of the anechoic response, read off a 32x resampling
        h0 = generate_rir(room, p, free).samples
        peak = np.max(np.abs(resample(h0, 32 * h0.size)))
        peak_err = max(peak_err, abs(peak - 1 / (4 * math.pi * d)) * 4 * math.pi * d)
    elapsed = time.perf_counter() - start
    ok = oracle_err < 1e-6 and arrival_off <= 2 and peak_err < 0.02 and elapsed < 30
    criterion(
        "Image-source oracle: brute force within 1e-6, arrival within 2, peak within 2%, < 30 s",
        ok,
        f"oracle {oracle_err:.1e}, arrival {arrival_off:.0f} samples, peak {100 * peak_err:.2f}%, {elapsed:.1f} s",
    )


# --- contrastive loss ------------------------------------------------------------------


def test_contrastive_loss_correctness(criterion):
    rng = np.random.default_rng(2)
    a = 0.0
    for b in (1, 2, 5, 17, 55):
        for tau in (0.07, 0.3, 1.0):
            e1, e2 = unit_rows(rng, b, 32), unit_rows(rng, b, 32)
            got = contrastive_loss(EmbeddingBatch(e1, e2, np.arange(b)), tau).item()
            a = max(a, abs(got - infonce(e1, e2, tau)))
    eye = np.eye(2)
    b2 = abs(contrastive_loss(EmbeddingBatch(eye, eye, [0, 1]), 1.0).item() + math.log(math.e / (math.e + 1)))
    c = 0.0
    for b in (1, 4, 55):
        e = np.repeat(unit_rows(rng, 1, 8), b, axis=0)
        c = max(c, abs(contrastive_loss(EmbeddingBatch(e, e, [3] * b), 0.07).item() - math.log(b)))
    d = 0.0
    for b in (1, 2, 7, 55):
        p = smdp(unit_rows(rng, b, 32), unit_rows(rng, b, 32), 0.07)
        d = max(d, np.max(np.abs(p.sum(axis=1) - 1)))
    ok = a < 1e-9 and b2 < 1e-9 and c < 1e-9 and d < 1e-6
    criterion("Contrastive loss: InfoNCE, B=2 hand value, ln B, smdp rows", ok,
              f"(a) {a:.1e} (b) {b2:.1e} (c) {c:.1e} (d) {d:.1e}")


# --- gradients ---------------------------------------------------------------------------


def _grad_error(loss_fn, tensors):
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    worst = 0.0
    for t in tensors:
        worst = max(worst, rel_error(t.grad, numeric_grad(lambda: loss_fn().item(), t.data, h=1e-5)))
    return worst


def test_gradient_suite(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    errors = {}

    x = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    w = rng.standard_normal((6, 4))
    lin = Linear(5, 4, rng)
    errors["linear"] = _grad_error(lambda: (lin(x) * w).sum(), [x, lin.weight, lin.bias])
    v = rng.standard_normal((6, 5))
    relu = ReLU()
    errors["relu"] = _grad_error(lambda: (relu(x) * v).sum(), [x])

    bn = BatchNorm1d(5)
    errors["batchnorm"] = _grad_error(lambda: (bn(x) * v * x).sum(), [x, bn.gamma, bn.beta_shift])

    drop = Dropout(0.3, np.random.default_rng(0))
    mask_seed = 11

    def dropped():
        drop.rng = np.random.default_rng(mask_seed)  # same mask on every evaluation
        return (drop(x) * x).sum()

    errors["dropout"] = _grad_error(dropped, [x])

    block = ff_block(5, 3, rng)
    saved = block.layers[2].running_mean.copy(), block.layers[2].running_var.copy()
    proj = rng.standard_normal((6, 3))

    def ff():
        block.layers[2].running_mean, block.layers[2].running_var = saved[0].copy(), saved[1].copy()
        return (l2_normalize(block(x)) * proj).sum()

    errors["ff_block+l2_normalize"] = _grad_error(ff, [x, block.layers[0].weight, block.layers[2].gamma])

    cfg = EncoderConfig(embedding_dim=4, rir_dims=(6,), speech_frame_dim=5, speech_hidden=4,
                        speech_encoder="frame-stats")
    model = DualEncoder(cfg, 0)
    model.eval()
    # a generic point: at init the zero shifts can leave an all-zero embedding
    params = [p for _, p in model.named_parameters() if p.requires_grad and p.data.ndim > 0]
    for p in params:
        p.data[...] = rng.standard_normal(p.data.shape) * 0.5
    speech = rng.standard_normal((3, 4, cfg.speech_bins))
    rirs = rng.standard_normal((3, cfg.rir_bins))
    proj = rng.standard_normal((3, 4))
    errors["encoders"] = _grad_error(
        lambda: ((model.embed_speech(speech) + model.embed_rir(rirs)) * proj).sum(), params
    )

    r1 = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    r2 = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    log_tau = Tensor(np.array(math.log(0.2)), requires_grad=True)
    labels = np.array([0, 1, 0, 2, 1, 1])
    errors["contrastive"] = _grad_error(
        lambda: contrastive_loss(EmbeddingBatch(l2_normalize(r1), l2_normalize(r2), labels), log_tau.exp()),
        [r1, r2, log_tau],
    )
    z = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    errors["cross_entropy"] = _grad_error(lambda: softmax_cross_entropy(z, [0, 3, 1, 1, 2]), [z])
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    name = max(errors, key=errors.get)
    criterion("Gradient suite: relative error < 1e-4, < 60 s", worst < 1e-4 and elapsed < 60,
              f"worst {worst:.1e} ({name}), {len(errors)} checks, {elapsed:.1f} s")


# --- schedules and optimiser ------------------------------------------------------------


def test_schedule_and_optimizer_closed_forms(criterion):
    total, base, ratio = 1000, 1e-3, 0.05
    warm = LrSchedule("linear_warmup", base, total, warmup_ratio=ratio)
    end = round(ratio * total)
    expected = {0: 0.0, end: base, total // 2: base * (total - total // 2) / (total - end), total: 0.0}
    ok = all(lr_at(warm, s) == v for s, v in expected.items())
    poly = LrSchedule("polynomial", 1e-4, 100, power=0.1)
    ok &= lr_at(poly, 0) == 1e-4 and lr_at(poly, 50) == 1e-4 * 0.5**0.1 and lr_at(poly, 100) == 0.0

    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    p.grad = np.zeros(1)
    opt.step()
    decay = abs(p.data[0] - 0.999)
    q = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([q], lr=0.1, weight_decay=0.0)
    q.grad = np.ones(1)
    opt.step()
    first = abs(q.data[0] - (1.0 - 0.1 / (1.0 + 1e-8)))
    ok &= decay < 1e-12 and first < 1e-12
    criterion("Schedules exact at 0/warmup end/half/total; AdamW hand values within 1e-12", ok,
              f"decay-only {decay:.1e}, first step {first:.1e}")


# --- desk-scale experiment -------------------------------------------------------------------


def desk_config(seed: int) -> RunConfig:
    cfg = preset("desk")
    return RunConfig(**{**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__}, "seed": seed})


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    runs = {}
    start = time.perf_counter()
    with threadpool_limits(limits=1):
        for seed in DESK_SEEDS:
            runs[seed] = pipeline.run_all(desk_config(seed), root / f"seed{seed}").metrics
    return runs, time.perf_counter() - start, root


def _desk_targets(m: dict) -> dict[str, tuple[bool, float]]:
    res, pre = m["results"], m["pretrain"]
    speech = res["speech_head"]["speech_set"]
    return {
        "loss": (pre["final_train_loss"] < 0.8 * pre["initial_loss"], pre["final_train_loss"] / pre["initial_loss"]),
        "top1": (speech["top1"] >= 0.60, speech["top1"]),
        "types": (speech["type_top1"] >= 0.80, speech["type_top1"]),
        "rir>=speech": (
            res["rir_head"]["rir_set"]["top1"] >= res["speech_head"]["rir_set"]["top1"],
            res["rir_head"]["rir_set"]["top1"] - res["speech_head"]["rir_set"]["top1"],
        ),
    }


@pytest.mark.slow
def test_desk_end_to_end(desk_runs, criterion):
    runs, elapsed, _ = desk_runs
    lines, passing = [], []
    for seed, m in runs.items():
        t = _desk_targets(m)
        if all(ok for ok, _ in t.values()):
            passing.append(seed)
        lines.append(
            f"seed {seed}: loss ratio {t['loss'][1]:.2f}, top-1 {t['top1'][1]:.3f}, "
            f"types {t['types'][1]:.3f}, rir-speech {t['rir>=speech'][1]:+.3f}"
        )
    detail = "; ".join(lines) + f"; seeds meeting all targets {passing}; {elapsed / 60:.1f} min"
    criterion("Desk end-to-end: targets (i)-(iv) on the best of 3 seeds, < 30 min", bool(passing) and elapsed < 1800,
              detail)


@pytest.mark.slow
def test_baseline_criterion(desk_runs, criterion):
    runs, _, root = desk_runs
    bank, _ = read_bank(root / f"seed{DETERMINISM_SEED}" / pipeline.BANK_FILE)
    a = feature_matrix(bank)
    b = feature_matrix(bank)
    features_ok = a.shape == (len(bank), 30) and bool(np.all(np.isfinite(a))) and np.array_equal(a, b)
    per_seed, ok = [], features_ok
    for seed, m in runs.items():
        base = m["results"]["baseline"]["rir_set"]["top1"]
        rir = m["results"]["rir_head"]["rir_set"]["top1"]
        ok &= base >= 2 / 6 and rir >= base
        per_seed.append(f"seed {seed}: baseline {base:.3f}, rir encoder {rir:.3f}")
    detail = f"features finite+deterministic on {len(bank)} RIRs: {features_ok}; " + "; ".join(per_seed)
    criterion("Baseline: features finite and deterministic, top-1 >= 2x random, RIR encoder >= baseline", ok, detail)


@pytest.mark.slow
def test_determinism(desk_runs, tmp_path, criterion):
    _, _, root = desk_runs
    first = root / f"seed{DETERMINISM_SEED}"
    with threadpool_limits(limits=1):
        pipeline.run_all(desk_config(DETERMINISM_SEED), tmp_path)
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    differing = [str(f) for f in files if (first / f).read_bytes() != (tmp_path / f).read_bytes()]
    ckpts = [str(f) for f in files if f.suffix == ".ckpt"]
    ok = not differing and "metrics.json" in map(str, files) and len(ckpts) == 4
    criterion("Determinism: repeated desk pipeline is byte-identical", ok,
              f"{len(files)} artifacts compared ({', '.join(ckpts)}, metrics.json, ...); differing: {differing or 'none'}")
