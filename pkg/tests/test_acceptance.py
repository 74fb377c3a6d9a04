"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Reconstruction-based criteria (5, 6, 8) share one setting: K=64, B=8,
stride 1, mini-batches of 2048 patches, 12 epochs of which the first 3 are
sampled burn-in.
"""

import math
import time

import numpy as np
import pytest

from csstem.acquisition import NoiseKind, NoiseSpec, acquire
from csstem.bpfa import (
    BatchSchedule,
    BpfaHyperparams,
    atom_pixel_conditional,
    noise_precision_posterior,
    pi_posterior,
    reconstruct_patches,
    run_inference,
    weight_conditional,
    weight_precision_posterior,
)
from csstem.cli import main
from csstem.experiments import ReconSettings, curve_summary, run_curve, run_dose_series
from csstem.imaging import PatchGrid, extract_patches, psnr, reassemble
from csstem.phantom import lattice_phantom
from csstem.sampling import (
    DoseBudget,
    LineHopParams,
    constrained_dwell,
    linehop_base_rows,
    linehop_plan,
    round_half_up,
    uds_plan,
    widest_amplitude,
)

from oracles import moments_1d, moments_log_scale, moments_of
from test_bpfa import patch_loglik, tiny

SETTINGS = ReconSettings(patch_size=8, hyper=BpfaHyperparams(K=64),
                         schedule=BatchSchedule(batch_size=2048, epochs=12, burn_in=3))
RATIOS = [0.1, 0.2, 0.3, 0.4, 0.5]


def test_criterion_01_patch_law(criterion):
    rng = np.random.default_rng(2024)
    bad = []
    for _ in range(50):
        n = int(rng.integers(1, 65))
        B = int(rng.integers(1, n + 1))
        got = len(extract_patches(np.zeros((n, n)), None, B))
        if got != (n - B + 1) ** 2:
            bad.append((n * n, B, got))
    assert criterion(1, not bad, f"50 (N, B) pairs, mismatches: {bad or 'none'}")


def test_criterion_02_round_trip(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        h, w = (int(v) for v in rng.integers(8, 65, 2))
        B = int(rng.integers(1, min(h, w) + 1))
        img = rng.random((h, w))
        ps = extract_patches(img, None, B)
        worst = max(worst, float(np.abs(reassemble(ps.values, ps.grid).data - img).max()))
    assert criterion(2, worst <= 1e-6, f"20 images, worst pixel error {worst:.2e} (limit 1e-6)")


def _conjugacy_errors():
    """Relative errors of every conditional against grid integration on a tiny instance."""
    state, Y, obs, hyper = tiny()
    Yz = np.where(obs, Y, 0.0)
    errs = {}

    def record(name, mean, var, om, ov):
        errs[name] = max(abs(mean - om) / abs(om), abs(var - ov) / abs(ov))

    for i in range(2):
        for k in range(2):
            m = obs[i].astype(float)
            alpha = state.alpha[i].copy()
            mean, prec, _ = weight_conditional(Yz[i], m, state.D, alpha, k, state.gamma_n,
                                               state.gamma_w)

            def lp(w):
                out = np.empty_like(w)
                for j, v in enumerate(w):
                    a = alpha.copy()
                    a[k] = v
                    out[j] = patch_loglik(Yz[i], m, state.D, a, state.gamma_n)
                return out - 0.5 * state.gamma_w * w ** 2

            sd = prec ** -0.5
            record(f"w[{i},{k}]", mean, 1 / prec, *moments_1d(lp, mean - 15 * sd, mean + 15 * sd, 20001))

    for k in range(2):
        for p in range(4):
            mean, prec = atom_pixel_conditional(state, Y, k, p, observed=obs)

            def lp(d):
                out = np.empty_like(d)
                for j, v in enumerate(d):
                    D = state.D.copy()
                    D[p, k] = v
                    out[j] = sum(patch_loglik(Yz[i], obs[i].astype(float), D, state.alpha[i],
                                              state.gamma_n) for i in range(2))
                return out - 0.5 * 4 * d ** 2

            sd = prec ** -0.5
            record(f"d[{p},{k}]", mean, 1 / prec, *moments_1d(lp, mean - 15 * sd, mean + 15 * sd, 20001))

    a0, b0 = hyper.beta_prior
    for k in range(2):
        zs = int(state.z[:, k].sum())
        al, be = pi_posterior(zs, 2, hyper)
        om, ov = moments_of(lambda u: -(a0 + zs) * np.logaddexp(0, -u) - (b0 + 2 - zs) * np.logaddexp(0, u),
                            lambda u: 1 / (1 + np.exp(-u)), -80, 80, 400001)
        record(f"pi[{k}]", al / (al + be), al * be / ((al + be) ** 2 * (al + be + 1)), om, ov)

    R = (obs * (Yz - state.alpha @ state.D.T))[obs]
    s, r = noise_precision_posterior(float(R @ R), float(obs.sum()), hyper)
    om, ov = moments_log_scale(lambda g: (hyper.c - 1 + 0.5 * len(R)) * np.log(g)
                               - (hyper.d + 0.5 * float(R @ R)) * g, 1e-6, 1e4)
    record("gamma_n", s / r, s / r ** 2, om, ov)

    act = state.w[state.z]
    s, r = weight_precision_posterior(len(act), float(act @ act), hyper)
    om, ov = moments_log_scale(lambda g: (hyper.e - 1 + 0.5 * len(act)) * np.log(g)
                               - (hyper.f + 0.5 * float(act @ act)) * g, 1e-6, 1e4)
    record("gamma_w", s / r, s / r ** 2, om, ov)
    return errs


def test_criterion_03_conjugacy_oracle(criterion):
    t = time.time()
    errs = _conjugacy_errors()
    name = max(errs, key=errs.get)
    ok = errs[name] < 1e-3 and time.time() - t < 30
    assert criterion(3, ok, f"{len(errs)} conditionals, worst relative error {errs[name]:.1e} "
                            f"({name}), {time.time() - t:.1f} s")


def planted_image(seed):
    """64x64 image tiled by 8x8 patches drawn as D0 @ alpha with three atoms."""
    rng = np.random.default_rng(seed)
    D0 = rng.normal(0.0, 1 / 8, (64, 3))
    X = rng.normal(0.0, 1.0, (64, 3)) @ D0.T
    grid = PatchGrid(64, 64, 8, 8)
    img = np.zeros((64, 64))
    for (r, c), x in zip(grid.origins, X):
        img[r:r + 8, c:c + 8] = x.reshape(8, 8)
    return img, grid


def test_criterion_04_planted_recovery(criterion):
    t = time.time()
    good, detail = 0, []
    for seed in range(10):
        truth, grid = planted_image(seed)
        ps = extract_patches(truth, None, 8, 8)
        state, _ = run_inference(ps, BpfaHyperparams(K=16), BatchSchedule(epochs=40, burn_in=3),
                                 seed=seed)
        rec = reconstruct_patches(state, grid, clip=False).data
        value = psnr(truth, rec, peak=float(np.ptp(truth)))
        n_atoms = int((state.pi > 0.5).sum())
        good += n_atoms == 3 and value > 40
        detail.append(f"{n_atoms}/{min(value, 999):.0f}")
    elapsed = time.time() - t
    assert criterion(4, good >= 8 and elapsed < 180,
                     f"{good}/10 seeds with 3 atoms and PSNR > 40 dB "
                     f"[atoms/dB: {' '.join(detail)}], {elapsed:.0f} s")


def test_criterion_05_beats_zero_fill(criterion):
    from csstem.experiments import reconstruct
    t = time.time()
    truth = lattice_phantom(128)
    gains = []
    for seed in range(5):
        obs = acquire(truth, uds_plan(128, 128, 0.3, seed=seed))
        res = reconstruct(obs.image, obs.mask, SETTINGS, seed)
        gains.append(psnr(truth, res.image) - psnr(truth, obs.image))
    elapsed = time.time() - t
    assert criterion(5, min(gains) >= 6 and elapsed < 300,
                     f"gain over zero fill {', '.join(f'{g:.1f}' for g in gains)} dB "
                     f"(need >= 6 every seed), {elapsed:.0f} s")


def test_criterion_06_scheme_curve(criterion):
    t = time.time()
    truth = lattice_phantom(128)
    rows = run_curve(truth, RATIOS, range(10), ("uds", "linehop"), SETTINGS)
    means = {(s, r): m for s, r, m, _, _ in curve_summary(rows)}
    uds = [means[("uds", r)] for r in RATIOS]
    lh = [means[("linehop", r)] for r in RATIOS]
    gaps = [u - l for u, l in zip(uds, lh)]
    ordering = all(g >= 0 for g in gaps)
    monotone = all(b >= a for a, b in zip(uds, uds[1:])) and all(b >= a for a, b in zip(lh, lh[1:]))
    small_gap = all(g <= 3 for g in gaps)
    elapsed = time.time() - t
    ok = ordering and monotone and small_gap and elapsed < 1800
    table = "; ".join(f"{r:.0%} uds {u:.2f} lh {l:.2f}" for r, u, l in zip(RATIOS, uds, lh))
    assert criterion(6, ok, f"ordering={ordering} monotone={monotone} gap<=3dB={small_gap} "
                            f"[{table}], {elapsed:.0f} s")


def test_criterion_07_dose_arithmetic(criterion):
    n = 512 * 512
    budget = DoseBudget(4.0, n)
    expected = [8.0, 10.0, 40.0 / 3, 20.0, 40.0]
    got = [constrained_dwell(budget, r * n) for r in (0.5, 0.4, 0.3, 0.2, 0.1)]
    ok = all(abs(g - e) <= math.ulp(e) for g, e in zip(got, expected))
    assert criterion(7, ok, "dwell " + ", ".join(repr(g) for g in got) + " us")


def test_criterion_08_dose_trend(criterion):
    t = time.time()
    truth = lattice_phantom(128)
    rows = run_dose_series(truth, [0.1, 0.5], range(10),
                           noise=NoiseSpec(NoiseKind.GAUSSIAN, 0.1), settings=SETTINGS,
                           crop_size=64)
    by_seed = {}
    for r in rows:
        by_seed.setdefault(r.seed, {})[r.ratio] = r
    wins = sum(v[0.1].psnr >= v[0.5].psnr for v in by_seed.values())
    d10, d50 = by_seed[0][0.1].dwell, by_seed[0][0.5].dwell
    lo = np.mean([v[0.1].psnr for v in by_seed.values()])
    hi = np.mean([v[0.5].psnr for v in by_seed.values()])
    elapsed = time.time() - t
    assert criterion(8, wins >= 8 and elapsed < 1800,
                     f"(10%, {d10:.2f} us) >= (50%, {d50:.2f} us) in {wins}/10 seeds; "
                     f"mean {lo:.2f} vs {hi:.2f} dB, {elapsed:.0f} s")


def test_criterion_09_linehop_mechanics(criterion):
    t = time.time()
    rng = np.random.default_rng(99)
    problems = []
    for seed in range(100):
        H, W = (int(v) for v in rng.integers(16, 129, 2))
        ratio = float(rng.uniform(0.05, 0.5))
        L = round_half_up(ratio * H)
        if L < 1:
            continue
        h_max = widest_amplitude(H, L)
        h = int(rng.integers(0, h_max + 1))
        params = LineHopParams(h, float(rng.uniform(0.2, 1.0)), seed)
        plan = linehop_plan(H, W, ratio, params)
        pos = plan.positions
        flat = pos[:, 0] * W + pos[:, 1]
        base = linehop_base_rows(H, L)
        lines = pos.reshape(L, W, 2)
        dev = np.abs(lines[:, :, 0] - base[:, None]).max()
        jump = np.abs(np.diff(lines[:, :, 0], axis=1)).max() if W > 1 else 0
        if len(np.unique(flat)) != plan.M or dev > h or jump > 1:
            problems.append(seed)
    elapsed = time.time() - t
    assert criterion(9, not problems and elapsed < 10,
                     f"100 seeds, failing seeds: {problems or 'none'}, {elapsed:.1f} s")


def _run_twice(tmp_path, name, *args):
    dirs = []
    for k in ("a", "b"):
        d = tmp_path / f"{name}_{k}"
        d.mkdir()
        argv = [str(a).replace("{out}", str(d)) for a in args]
        assert main(argv) == 0, argv
        dirs.append(d)
    diffs = []
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
    for f in files:
        if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes():
            diffs.append(f"{name}/{f}")
    return files, diffs


def test_criterion_10_determinism(tmp_path, criterion):
    t = time.time()
    fast = ["--K", "8", "-B", "4", "--epochs", "5", "--burn-in", "2"]
    src = tmp_path / "src"
    src.mkdir()
    assert main(["phantom", "--size", "24", "--spacing", "6", "--out", str(src / "truth.pgm")]) == 0
    assert main(["plan", "--scheme", "uds", "--ratio", "0.4", "--size", "24", "--seed", "1",
                 "--out", str(src / "plan.txt")]) == 0
    assert main(["acquire", "--truth", str(src / "truth.pgm"), "--plan", str(src / "plan.txt"),
                 "--out-dir", str(src / "obs")]) == 0
    obs = src / "obs"
    commands = {
        "plan_uds": ["plan", "--scheme", "uds", "--ratio", "0.3", "--size", "40x30", "--seed", "3",
                     "--out", "{out}/plan.txt"],
        "plan_linehop": ["plan", "--scheme", "linehop", "--ratio", "0.3", "--size", "40x30",
                         "--seed", "3", "--out", "{out}/plan.txt"],
        "acquire": ["acquire", "--truth", src / "truth.pgm", "--plan", src / "plan.txt",
                    "--noise", "gaussian", "--sigma0", "0.05", "--seed", "2", "--out-dir", "{out}"],
        "reconstruct": ["reconstruct", "--observation", obs / "observation.raw", "--mask",
                        obs / "mask.pbm", "--seed", "4", "--out-dir", "{out}", *fast],
        "denoise": ["denoise", "--input", src / "truth.pgm", "--seed", "4", "--out-dir", "{out}", *fast],
        "curve": ["curve", "--phantom-size", "24", "--phantom-spacing", "6", "--ratios", "0.3,0.5",
                  "--seeds", "0-1", "--out-dir", "{out}", *fast],
        "dose": ["dose-series", "--phantom-size", "24", "--phantom-spacing", "6",
                 "--ratios", "0.5,0.25", "--seeds", "0,1", "--crop-size", "12", "--out-dir", "{out}",
                 *fast],
    }
    n_files, diffs = 0, []
    for name, argv in commands.items():
        files, d = _run_twice(tmp_path, name, *argv)
        n_files += len(files)
        diffs += d
    elapsed = time.time() - t
    assert criterion(10, not diffs and elapsed < 60,
                     f"{len(commands)} commands, {n_files} files compared, differing: "
                     f"{diffs or 'none'}, {elapsed:.1f} s")
