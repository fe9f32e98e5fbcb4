"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured value so
``pytest -v -s tests/test_acceptance.py`` reads as a report.
"""
import json
import os
import re
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from msvit.attention import MSSA, SSA, mssa_attend, ssa_attend
from msvit.cli import main as cli_main
from msvit.config import load_profile
from msvit.data import CIFAR_TEST_FILES, CIFAR_TRAIN_FILES
from msvit.embedding import SPEMSF
from msvit.energy import Profiler
from msvit.model import build_model, count_parameters
from msvit.spike import (LIF, LifParams, SpikeConv2d, SpikeLinear, lif_forward, set_smooth,
                         spike_conv2d, spike_linear)

from fd import fd_check
from oracles import lif_scalar, mssa_reference, ssa_reference


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {number} {title}: {detail}")
    return emit


def test_01_lif_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(10_000):
        tau, v_th = rng.uniform(1.5, 4.0), rng.uniform(0.5, 2.0)
        steps = int(rng.integers(1, 17))
        xs = rng.uniform(-0.5, 2.5, size=steps) * v_th
        got = lif_forward(torch.from_numpy(xs)[:, None], LifParams(tau=tau, v_th=v_th))
        want, _ = lif_scalar(xs.tolist(), tau, v_th)
        mismatches += got[:, 0].tolist() != want
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10
    report(1, "LIF oracle equivalence", ok,
           f"10000 cases, {mismatches} mismatches, {elapsed:.1f} s (limit 10 s)")
    assert ok


def _rand_spikes(rng, shape, p=None):
    p = rng.uniform(0.1, 0.7) if p is None else p
    return torch.from_numpy((rng.random(shape) < p).astype(np.float64))


def test_02_mssa_bruteforce(report):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        t, n, d = (int(rng.integers(1, 5)), int(rng.integers(1, 17)), int(rng.integers(1, 17)))
        b = int(rng.integers(1, 3))
        k = int(rng.integers(1, 3))  # one branch (P-only/Q-only) or two
        branches = [_rand_spikes(rng, (t, b, n, d)) for _ in range(k)]
        v = _rand_spikes(rng, (t, b, n, d))
        tau, v_th = rng.uniform(1.5, 4.0), rng.uniform(0.5, 2.0) * d / 4
        got = mssa_attend(branches, v, LIF(LifParams(tau=tau, v_th=v_th)))
        _, _, want = mssa_reference([q.tolist() for q in branches], v.tolist(), tau, v_th)
        bad += got.tolist() != want
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 30
    report(2, "MSSA brute-force equivalence", ok,
           f"1000 instances, {bad} mismatches, {elapsed:.1f} s (limit 30 s)")
    assert ok


def test_03_ssa_bruteforce(report):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        t, n = int(rng.integers(1, 5)), int(rng.integers(1, 17))
        d = int(rng.choice([2, 4, 6, 8, 12, 16]))
        heads = int(rng.choice([h for h in (1, 2, 4, 8) if d % h == 0]))
        q, k, v = (_rand_spikes(rng, (t, 1, n, d)) for _ in range(3))
        tau, v_th = rng.uniform(1.5, 4.0), rng.uniform(0.5, 2.0)
        got = ssa_attend(q, k, v, heads, 0.125, LIF(LifParams(tau=tau, v_th=v_th)))
        _, want = ssa_reference(q.tolist(), k.tolist(), v.tolist(), heads, 0.125, tau, v_th)
        bad += got.tolist() != want
    elapsed = time.perf_counter() - t0
    ok = bad == 0
    report(3, "SSA brute-force equivalence", ok,
           f"1000 instances, s=0.125, {bad} mismatches, {elapsed:.1f} s")
    assert ok


def test_04_complexity_witness(report):
    t0 = time.perf_counter()
    dim, steps = 32, 4
    g = torch.Generator().manual_seed(1)
    base = (torch.rand(steps, 2, 16, 8, dim, generator=g) < 0.3).float()  # (T, B, H, W, D)
    tokens = lambda x: x.reshape(x.shape[0], x.shape[1], -1, dim)
    small, big = tokens(base), tokens(torch.cat([base, base], dim=3))  # N = 128 and 256

    def sops(module, x, hw):
        with Profiler() as prof, torch.no_grad():
            module(x, hw)
        return prof.report(steps)

    torch.manual_seed(0)
    mssa = MSSA(dim).eval()
    r_mssa = sops(mssa, big, (16, 16)).total_sops / sops(mssa, small, (16, 8)).total_sops
    torch.manual_seed(0)
    ssa = SSA(dim, heads=8).eval()
    attn = lambda rep: sum(l.sops for l in rep.layers if l.kind in ("ssa_qk", "ssa_av"))
    r_ssa = attn(sops(ssa, big, (16, 16))) / attn(sops(ssa, small, (16, 8)))
    elapsed = time.perf_counter() - t0
    ok = abs(r_mssa - 2.0) <= 0.1 and abs(r_ssa - 4.0) <= 0.2 and elapsed < 60
    report(4, "complexity witness", ok,
           f"MSSA SOPs N=256/N=128 = {r_mssa:.4f} (2.0 +-5%), SSA attention term = "
           f"{r_ssa:.4f} (4.0 +-5%), {elapsed:.2f} s")
    assert ok


def test_05_gradient_check(report):
    t0 = time.perf_counter()
    cfg = load_profile("msvit-tiny").replace(timesteps=2)
    assert list(cfg.depths) == [1, 1, 1] and cfg.dims[-1] == 16
    model = build_model(cfg).double()
    set_smooth(model)
    model.train()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1])
    params = list(model.parameters())
    worst, n = fd_check(lambda: F.cross_entropy(model(x), y), params, n_samples=200, seed=0)
    elapsed = time.perf_counter() - t0
    ok = n >= 200 and worst < 1e-4 and elapsed < 300
    report(5, "gradient check (smoothed, float64)", ok,
           f"{n} parameters, max rel err {worst:.2e} (limit 1e-4), {elapsed:.1f} s")
    assert ok


def test_06_energy_fixture(report):
    t0 = time.perf_counter()
    image = torch.rand(1, 1, 1, 4, 4)
    stem = torch.randn(1, 1, 3, 3)
    spikes = torch.tensor([[[[1.0, 0.0, 1.0, 0.0]]]])  # fr = 0.5
    with Profiler() as prof:
        spike_conv2d(image, stem, padding=1, name="stem", entrance=True)
        spike_linear(spikes, torch.randn(2, 4), name="fc")
    rep = prof.report(timesteps=1)
    elapsed = time.perf_counter() - t0
    flops = {l.path: l.flops for l in rep.layers}
    ok = (rep.total_pj == 666.0 and flops == {"stem": 144, "fc": 8}
          and (rep.e_mac, rep.e_ac) == (4.6, 0.9) and elapsed < 1)
    report(6, "energy formula", ok,
           f"total {rep.total_pj!r} pJ (want 666.0), FLOPs {flops}, {elapsed * 1000:.0f} ms")
    assert ok


def _token_probe(cfg):
    small = cfg.replace(dims=[8, 16, 32], depths=[1, 1, 1], heads=8, timesteps=1)
    model = build_model(small).eval()
    seen = {}
    model.probe = lambda tag, t: seen.setdefault(tag, t.shape[2])
    with torch.no_grad():
        model(torch.rand(1, cfg.in_channels, *cfg.img_size))
    return [seen[f"stage{i}.out"] for i in (1, 2, 3)]


def _inspect_tokens(profile, capsys):
    cli_main(["inspect", "--profile", profile])
    out = capsys.readouterr().out
    rows = [l.split() for l in out.splitlines() if re.match(r"^[123]\s", l)]
    return [int(r[2]) for r in rows]


def test_07_architecture_shape(report, capsys):
    got = {}
    for profile, want in (("msvit-10-768", [3136, 784, 196]), ("msvit-cifar", [64, 16, 4])):
        got[profile] = (_inspect_tokens(profile, capsys), _token_probe(load_profile(profile)), want)
    ok = all(a == want and b == want for a, b, want in got.values())
    detail = "; ".join(f"{p}: inspect {a}, probe {b}" for p, (a, b, _) in got.items())
    report(7, "architecture shape", ok, detail)
    assert ok


def test_08_parameter_count(report):
    anchors = {"msvit-10-768": 69.80e6, "msvit-cifar": 7.59e6}
    got = {p: count_parameters(load_profile(p)) for p in anchors}
    dev = {p: got[p] / anchors[p] - 1 for p in anchors}
    ok = all(abs(d) <= 0.15 for d in dev.values())
    report(8, "parameter-count anchor", ok,
           "; ".join(f"{p}: {got[p] / 1e6:.2f}M vs {anchors[p] / 1e6:.2f}M ({dev[p]:+.1%})"
                     for p in anchors))
    assert ok


def test_09a_synthetic_events(report, tmp_path, capsys):
    t0 = time.perf_counter()
    rc = cli_main(["train", "--profile", "msvit-tiny-events", "--dataset", "synth-events",
                   "--per-class", "200", "--epochs", "15", "--batch", "32", "--lr", "0.05",
                   "--seed", "0", "--deterministic", "--out", str(tmp_path)])
    capsys.readouterr()
    elapsed = time.perf_counter() - t0
    acc = json.loads((tmp_path / "summary.json").read_text())["final_eval"]["top1"] if rc == 0 else 0
    ok = rc == 0 and acc >= 0.90 and elapsed < 600
    report("9a", "synthetic 6-class events, T=8", ok,
           f"test acc {acc:.3f} (>= 0.90), {elapsed:.0f} s (limit 600 s)")
    assert ok


def _cifar_dir():
    root = os.environ.get("MSVIT_DATA_DIR")
    if not root:
        return None
    for d in (Path(root) / "cifar-10-batches-bin", Path(root)):
        if all((d / f).is_file() for f in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES):
            return d
    return None


def test_09b_cifar_two_class(report, tmp_path, capsys):
    d = _cifar_dir()
    if d is None:
        report("9b", "CIFAR-10 two-class subset, T=2", False,
               "not run: CIFAR-10 binaries not found under $MSVIT_DATA_DIR")
        pytest.xfail("CIFAR-10 binaries are not available in this environment")
    t0 = time.perf_counter()
    rc = cli_main(["train", "--profile", "msvit-tiny-cifar", "--dataset", "cifar10",
                   "--data-dir", str(d), "--classes", "0,1", "--train-limit", "2000",
                   "--test-limit", "400", "--epochs", "20", "--batch", "32", "--lr", "0.05",
                   "--seed", "0", "--deterministic", "--out", str(tmp_path)])
    capsys.readouterr()
    elapsed = time.perf_counter() - t0
    acc = json.loads((tmp_path / "summary.json").read_text())["final_eval"]["top1"] if rc == 0 else 0
    ok = rc == 0 and acc >= 0.80 and elapsed < 1800
    report("9b", "CIFAR-10 two-class subset, T=2", ok,
           f"test acc {acc:.3f} (>= 0.80), {elapsed:.0f} s (limit 1800 s)")
    assert ok


def _is_int_in(x, hi):
    return bool(torch.equal(x, x.round()) and x.min() >= 0 and x.max() <= hi)


def test_10_spike_purity(report):
    cfg = load_profile("msvit-tiny")
    model = build_model(cfg)
    violations, residual_max, checked = [], 0.0, 0

    def check(name, t, hi):
        nonlocal checked
        checked += 1
        if not _is_int_in(t.detach(), hi):
            violations.append(f"{name} max={float(t.max()):g}")

    hooks = []
    for name, m in model.named_modules():
        if isinstance(m, (LIF, SPEMSF)):
            hooks.append(m.register_forward_hook(
                lambda mod, inp, out, name=name: check(name, out, 1)))
        elif isinstance(m, (SpikeLinear, SpikeConv2d)) and not m.entrance:
            # layer inputs are spikes or, after a residual add, small integers
            hooks.append(m.register_forward_pre_hook(
                lambda mod, inp, name=name: check(name + ":in", inp[0], 4)))

    def probe(tag, t):
        nonlocal residual_max
        if tag == "residual":
            residual_max = max(residual_max, float(t.max()))
            check("residual", t, 4)
        else:
            check(tag, t, 4 if tag.endswith(".out") else 1)

    for blk in (b for stage in model.stages for b in stage):
        blk.probe = probe
    model.probe = probe
    for train in (True, False):
        model.train(train)
        with torch.no_grad():
            model(torch.rand(4, 3, 16, 16) * 3)
    for h in hooks:
        h.remove()
    ok = not violations
    report(10, "spike purity audit", ok,
           f"{checked} tensors checked, residual max {residual_max:g} (<= 4), "
           f"{len(violations)} violations {violations[:3]}")
    assert ok


def test_11_determinism(report, tmp_path, capsys):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        rc = cli_main(["train", "--profile", "msvit-tiny-events", "--dataset", "synth-events",
                       "--per-class", "4", "--epochs", "2", "--batch", "8", "--timesteps", "4",
                       "--seed", "7", "--deterministic", "--out", str(out)])
        assert rc == 0
    capsys.readouterr()
    a, b = ((o / "metrics.csv").read_bytes() for o in outs)
    ok = a == b and len(a) > 0
    report(11, "determinism", ok, f"metrics.csv {len(a)} bytes, identical={a == b}")
    assert ok
