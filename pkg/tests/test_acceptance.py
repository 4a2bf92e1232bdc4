"""Acceptance criteria 1-10.  Each test prints one PASS/FAIL line (see the terminal summary).

The full-scale ablation (criterion 6 at 128x128, 20 epochs) takes hours on a CPU and
only runs with ``DPARNET_FULL_ACCEPTANCE=1``; the CPU smoke version always runs.
"""
import hashlib
import math
import os
import shutil
import time
from collections import Counter

import numpy as np
import pytest
import torch

import _desk
from dparnet import cli
from dparnet.checkpoint import load_checkpoint, save_checkpoint
from dparnet.core import DegradationKind, ParamMap, Sequence, SmoothFieldSpec
from dparnet.data import load_split, synthetic_sequence
from dparnet.degrade import DegradationSpec, apply_noise, degrade
from dparnet.evaluation import benchmark_efficiency, evaluate, profile_jitter
from dparnet.metrics import nrmse, psnr, ssim, vi
from dparnet.models import DparNet, ModelConfig, count_flops, count_params, dparnet_forward, param_net_forward
from dparnet.train import TrainConfig, VGGFeatureExtractor, fit_dparnet, fit_param_net, total_loss, validation_psnr

pytestmark = pytest.mark.acceptance

FULL = os.environ.get("DPARNET_FULL_ACCEPTANCE") == "1"


# --------------------------------------------------------------------------- oracles
def oracle_psnr(a, b):
    se = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        se += (x - y) ** 2
    mse = se / a.size
    return 99.0 if mse == 0 else 10.0 * math.log10(1.0 / mse)


def oracle_ssim(a, b, size=11, sigma=1.5):
    """Explicit per-window loop with a separately built Gaussian kernel."""
    half = size // 2
    w = [[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma ** 2)) for j in range(size)]
         for i in range(size)]
    total = sum(map(sum, w))
    w = [[v / total for v in row] for row in w]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    H, W = a.shape
    vals = []
    for r in range(H - size + 1):
        for c in range(W - size + 1):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(size):
                for j in range(size):
                    x, y, k = a[r + i, c + j], b[r + i, c + j], w[i][j]
                    mx += k * x
                    my += k * y
            for i in range(size):
                for j in range(size):
                    x, y, k = a[r + i, c + j] - mx, b[r + i, c + j] - my, w[i][j]
                    sxx += k * x * x
                    syy += k * y * y
                    sxy += k * x * y
            vals.append(((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return sum(vals) / len(vals)


def oracle_nrmse(a, b):
    se = sum((x - y) ** 2 for x, y in zip(a.ravel().tolist(), b.ravel().tolist()))
    span = max(b.ravel()) - min(b.ravel())
    return math.sqrt(se / a.size) / (span if span > 0 else 1.0)


def oracle_vi(a, b):
    qa = [min(255, max(0, int(round(v * 255)))) for v in a.ravel().tolist()]
    qb = [min(255, max(0, int(round(v * 255)))) for v in b.ravel().tolist()]
    n = len(qa)

    def entropy(counts):
        return -sum(c / n * math.log(c / n) for c in counts.values())

    ha, hb, hab = entropy(Counter(qa)), entropy(Counter(qb)), entropy(Counter(zip(qa, qb)))
    mutual = ha + hb - hab
    return ha + hb - 2 * mutual


def test_c01_metric_oracles(criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {"psnr": 0.0, "ssim": 0.0, "nrmse": 0.0, "vi": 0.0}
    for _ in range(50):
        gt = rng.random((16, 16))
        pred = np.clip(gt + rng.normal(0, rng.uniform(0.01, 0.3), gt.shape), 0, 1)
        worst["psnr"] = max(worst["psnr"], abs(psnr(pred, gt) - oracle_psnr(pred, gt)))
        worst["ssim"] = max(worst["ssim"], abs(ssim(pred, gt) - oracle_ssim(pred, gt)))
        worst["nrmse"] = max(worst["nrmse"], abs(nrmse(pred, gt) - oracle_nrmse(pred, gt)))
        o = oracle_vi(pred, gt)
        worst["vi"] = max(worst["vi"], abs(vi(pred, gt) - o) / max(o, 1e-12))
    elapsed = time.perf_counter() - start
    tol = {"psnr": 1e-6, "ssim": 1e-6, "nrmse": 1e-7, "vi": 0.05}
    ok = all(worst[k] <= tol[k] for k in tol) and elapsed < 10
    criterion(1, "metric oracles", ok,
              ", ".join(f"{k} max err {worst[k]:.2e}" for k in worst) + f", {elapsed:.1f}s")
    assert ok


def test_c02_degradation_identity_and_monotonicity(criterion):
    start = time.perf_counter()
    clean = Sequence(synthetic_sequence(np.random.default_rng(3), 5, 64, 64, 1))
    identity, monotone, detail = True, True, []
    for kind in DegradationKind:
        spec = DegradationSpec(kind, SmoothFieldSpec(16), seed=11)
        zero = ParamMap(np.zeros((64, 64), np.float32), kind)
        identity &= np.array_equal(degrade(clean, zero, spec).frames, clean.frames)
        diffs = []
        for level in (0.25, 0.5, 1.0):
            pm = ParamMap(np.full((64, 64), level, np.float32), kind)
            diffs.append(float(np.mean(np.abs(degrade(clean, pm, spec).frames - clean.frames))))
        monotone &= all(b >= a for a, b in zip(diffs, diffs[1:]))
        detail.append(f"{kind.value} " + "/".join(f"{d:.4f}" for d in diffs))
    elapsed = time.perf_counter() - start
    ok = identity and monotone and elapsed < 30
    criterion(2, "degradation identity & monotonicity", ok,
              f"identity={identity}, mean|D-C| {'; '.join(detail)}, {elapsed:.1f}s")
    assert ok


def test_c03_noise_calibration(criterion):
    start = time.perf_counter()
    clean = Sequence(np.full((4, 256, 256, 1), 0.5, np.float32))
    pmap = ParamMap(np.full((256, 256), 0.51, np.float32), DegradationKind.NOISE)
    noisy = apply_noise(clean, pmap, seed=5)
    std = float(np.std(noisy.frames - clean.frames))
    elapsed = time.perf_counter() - start
    ok = abs(std - 0.2) / 0.2 < 0.05 and noisy.frames.size >= 1e5 and elapsed < 10
    criterion(3, "noise calibration", ok, f"std {std:.5f} vs 0.2 over {noisy.frames.size} samples")
    assert ok


def test_c04_gradient_check(criterion, vgg_weights):
    start = time.perf_counter()
    torch.manual_seed(0)
    cfg_m = ModelConfig(base_channels=8, rdb_layers=2, wide_channels=4)
    model = DparNet(cfg_m).double()
    # zero-initialized output layers would give trivially zero gradients upstream
    with torch.no_grad():
        for p in model.parameters():
            if torch.count_nonzero(p) == 0:
                p.normal_(0, 0.05)
    extractor = VGGFeatureExtractor(vgg_weights).double()
    cfg = TrainConfig(alpha1=1.0, alpha2=0.05)
    g = torch.Generator().manual_seed(1)
    frames = torch.rand(1, 5, 1, 16, 16, generator=g, dtype=torch.float64)
    pmap = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64)
    gt = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64)

    def loss_fn():
        return total_loss(model(frames, pmap, targets=[2])[:, 0], gt, cfg, extractor)

    model.zero_grad()
    loss_fn().backward()
    params = [p for p in model.parameters()]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(0)
    flat = rng.choice(sizes.sum(), 10, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    eps, worst = 1e-6, 0.0
    with torch.no_grad():
        for f in flat:
            pi = int(np.searchsorted(offsets, f, side="right") - 1)
            view = params[pi].view(-1)
            idx = int(f - offsets[pi])
            analytic = float(params[pi].grad.view(-1)[idx])
            orig = float(view[idx])
            view[idx] = orig + eps
            up = float(loss_fn())
            view[idx] = orig - eps
            down = float(loss_fn())
            view[idx] = orig
            numeric = (up - down) / (2 * eps)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and elapsed < 60
    criterion(4, "gradient check", ok, f"max relative error {worst:.2e} over 10 weights, {elapsed:.1f}s")
    assert ok


def test_c05_wide_model_overhead(criterion):
    full = count_params(DparNet(ModelConfig(variant="full")))
    v1 = count_params(DparNet(ModelConfig(variant="v1")))
    overhead = full / v1 - 1
    ok = overhead < 0.02
    criterion(5, "wide-model overhead", ok, f"full {full} vs v1 {v1} params: +{100 * overhead:.3f}%")
    assert ok


def test_c06_ablation_smoke(criterion, tmp_path):
    """CPU smoke: 64x64, 5 epochs, 3 seeds; full must at least match v1."""
    manifest = _desk.build_corpus(tmp_path, "denoise", n=100, size=64, frames=7, seed=6, val_fraction=0.25)
    res = _desk.run_ablation(manifest, ["v1", "full"], seeds=[0, 1, 2], epochs=5, crop=64, param_epochs=20)
    m = {k: float(np.mean(v)) for k, v in res.items()}
    ok = m["full"] >= m["v1"]
    criterion(6, "ablation trend (CPU smoke 64x64/5 ep)", ok,
              f"mean val PSNR full {m['full']:.3f} vs v1 {m['v1']:.3f} dB "
              f"({len(manifest.ids('train'))} train seqs)")
    assert ok


@pytest.mark.slow
@pytest.mark.skipif(not FULL, reason="full-scale ablation needs DPARNET_FULL_ACCEPTANCE=1 (hours on CPU)")
def test_c06_ablation_full(criterion, tmp_path):
    manifest = _desk.build_corpus(tmp_path, "denoise", n=300, size=128, frames=7, seed=6, val_fraction=0.25)
    res = _desk.run_ablation(manifest, ["v1", "v2", "v3", "full"], seeds=[0, 1, 2], epochs=20, crop=128)
    m = {k: float(np.mean(v)) for k, v in res.items()}
    ok = m["full"] - m["v1"] >= 0.2 and m["full"] > m["v2"] and m["full"] > m["v3"]
    criterion(6, "ablation trend (full 128x128/20 ep)", ok,
              ", ".join(f"{k} {v:.3f}" for k, v in m.items()) + f" dB; full-v1 {m['full'] - m['v1']:+.3f}")
    assert ok


def test_c07_param_net_identifiability(criterion):
    start = time.perf_counter()
    train_sigmas = list(np.linspace(5, 95, 19))
    train = _desk.in_memory_samples(152, seed=1, constant_sigma=train_sigmas)
    val = _desk.in_memory_samples(19, seed=2, constant_sigma=train_sigmas)
    ckpt = fit_param_net(train, val, _desk.desk_train(40, 64), _desk.desk_model(), "denoise")
    net = ckpt.build()
    errors = {}
    for sigma in (25, 50, 75):
        held = _desk.in_memory_samples(6, seed=100 + sigma, constant_sigma=[sigma])
        pred = np.mean([param_net_forward(net, s.degraded, "noise").phys.mean() for s in held])
        errors[sigma] = (float(pred), abs(pred - sigma) / sigma)
    elapsed = time.perf_counter() - start
    ok = all(e < 0.15 for _, e in errors.values()) and elapsed < 1800
    criterion(7, "parameter-net identifiability", ok,
              ", ".join(f"sigma {s}: {p:.1f} ({100 * e:.1f}%)" for s, (p, e) in errors.items())
              + f", {elapsed:.0f}s")
    assert ok


def test_c08_temporal_stability(criterion, tmp_path):
    # slowly drifting scenes, as from a fixed long-range camera; fast scene motion would
    # dominate the profile jitter of the clean sequence itself
    manifest = _desk.build_corpus(tmp_path, "deturbulence", n=40, size=64, frames=15, seed=8,
                                  length_scale=16, val_fraction=0.15, max_speed=0.2)
    train, val = load_split(manifest, "train"), load_split(manifest, "val")
    ckpt = fit_dparnet(train, val, _desk.desk_train(25, 64), _desk.desk_model("full"),
                       oracle_pmaps=True, task="deturbulence")
    model = ckpt.build()
    better = []
    for sample in load_split(manifest, "test"):
        restored, _ = dparnet_forward(model, sample.degraded, sample.pmap)
        col = sample.degraded.spatial_shape[1] // 2
        better.append(profile_jitter(restored, col) < profile_jitter(sample.degraded, col))
    frac = float(np.mean(better))
    ok = frac >= 0.8
    criterion(8, "temporal stability", ok, f"restored profile steadier on {sum(better)}/{len(better)} test sequences")
    assert ok


def _tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.suffix != ".log"):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def test_c09_reproducibility(criterion, tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    out = tmp_path / "sim"
    argv = ["simulate", "--task", "denoise", "--synthetic", "6", "--frames", "7", "--size", "64", "64",
            "--seed", "3", "--out", str(out)]
    digests = []
    for _ in range(2):
        shutil.rmtree(out, ignore_errors=True)
        assert cli.main(argv) == 0
        digests.append(_tree_digest(out))
    sim_ok = digests[0] == digests[1]

    from dparnet.data import DatasetManifest
    manifest = DatasetManifest.load(out)
    train, val = load_split(manifest, "train"), load_split(manifest, "val") or load_split(manifest, "train")[:1]
    ckpt = fit_dparnet(train, val, _desk.desk_train(1, 64), _desk.desk_model("v1"), task="denoise")
    reports = []
    for i in range(2):
        evaluate(ckpt, manifest, "test", out_dir=tmp_path / f"eval{i}")
        reports.append((tmp_path / f"eval{i}" / "metrics.json").read_bytes())
    eval_ok = reports[0] == reports[1]

    before = validation_psnr(ckpt.build(), val)
    save_checkpoint(ckpt, tmp_path / "ckpt")
    after = validation_psnr(load_checkpoint(tmp_path / "ckpt").build(), val)
    ckpt_ok = abs(before - after) <= 1e-6
    ok = sim_ok and eval_ok and ckpt_ok
    criterion(9, "reproducibility", ok,
              f"simulate identical={sim_ok}, metrics.json identical={eval_ok}, "
              f"checkpoint val PSNR delta {abs(before - after):.1e}")
    assert ok


def test_c10_efficiency_conventions(criterion):
    model = DparNet(ModelConfig(in_channels=3))
    f256, f512 = count_flops(model, 256, 256, 3), count_flops(model, 512, 512, 3)
    ratio = f512 / f256
    rep = benchmark_efficiency(model, rounds=3, warmup=1)
    units_ok = (abs(rep.params_millions - count_params(model) / 1e6) < 1e-12
                and abs(rep.flops_e10 - f256 / 1e10) < 1e-12
                and tuple(rep.shape) == (256, 256, 3) and rep.time_s > 0)
    default_rounds = benchmark_efficiency.__defaults__[0] == 100
    ok = abs(ratio - 4.0) <= 0.2 and units_ok and default_rounds
    criterion(10, "efficiency conventions", ok,
              f"FLOPs 512/256 ratio {ratio:.4f}; {rep.params_millions:.4f} M params, "
              f"{rep.flops_e10:.4f} e10 FLOPs, {rep.time_s:.3f} s/frame")
    assert ok
