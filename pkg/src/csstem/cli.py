"""Command-line front end.

Exit codes: 0 on success, 2 for usage or validation errors, 3 when inference
fails numerically. Every option may also come from a ``--config`` file of
``key=value`` lines; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._fileio import atomic_write_text, read_manifest, write_manifest
from .acquisition import NoiseKind, NoiseSpec, acquire, save_observation, shift_image
from .bpfa import (
    BatchSchedule,
    BpfaHyperparams,
    Mode,
    NumericalError,
    write_snapshot,
    write_trace,
)
from .experiments import (
    ReconSettings,
    curve_summary,
    default_crop,
    reconstruct,
    run_curve,
    run_dose_series,
)
from .imaging import Image, Mask, drift_matched_psnr, load_image, load_mask, psnr, save_image
from .phantom import lattice_phantom
from .sampling import (
    REFERENCE_DWELL_US,
    DoseBudget,
    LineHopParams,
    Scheme,
    make_plan,
    plan_metrics,
    read_plan,
    write_plan,
)

STOCHASTIC_HELP = "random seed (required)"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing helpers
# ---------------------------------------------------------------------------

def parse_ratio(text: str) -> float:
    """'25%' is a percentage, anything else a fraction."""
    text = text.strip()
    try:
        value = float(text[:-1]) / 100.0 if text.endswith("%") else float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid ratio {text!r}") from None
    return value


def parse_ratio_list(text: str) -> list[float]:
    return [parse_ratio(t) for t in text.split(",") if t.strip()]


def parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}, expected HxW or N") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}, expected HxW or N")
    return dims[0], dims[1]


def parse_pair(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'row,col', got {text!r}") from None
    return r, c


def parse_seeds(text: str) -> list[int]:
    """Comma list of seeds; 'a-b' expands to an inclusive range."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def expand_config(argv: list[str]) -> list[str]:
    """Replace ``--config FILE`` with the options it lists.

    File options are inserted right after the subcommand, so flags given on
    the command line override them.
    """
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise UsageError("--config needs a file name")
    path = argv[i + 1]
    rest = argv[:i] + argv[i + 2:]
    try:
        entries = read_manifest(path)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    tokens = []
    for key, value in entries.items():
        flag = "--" + key.replace("_", "-")
        low = value.lower()
        if low == "true":
            tokens.append(flag)
        elif low == "false":
            continue
        else:
            tokens += [flag, value]
    cmd = next((j for j, a in enumerate(rest) if not a.startswith("-")), None)
    if cmd is None:
        return rest + tokens
    return rest[:cmd + 1] + tokens + rest[cmd + 1:]


def add_bpfa_options(p: argparse.ArgumentParser, epochs: int = 60):
    g = p.add_argument_group("BPFA")
    g.add_argument("--K", type=int, default=64, help="dictionary size (default 64)")
    g.add_argument("--patch-size", "-B", type=int, default=8, help="patch side (default 8)")
    g.add_argument("--stride", type=int, default=1)
    g.add_argument("--epochs", type=int, default=epochs)
    g.add_argument("--batch-size", type=int, default=None,
                   help="patches per mini-batch (default min(2048, N_p))")
    g.add_argument("--burn-in", type=int, default=3, help="opening sampled epochs in EM mode")
    g.add_argument("--mode", choices=[m.value for m in Mode], default="em")
    for name in "abcdef":
        g.add_argument(f"--{name}", type=float, default=1.0 if name in "ab" else 1e-6)
    g.add_argument("--rm-kappa", type=float, default=None,
                   help="enable running-average statistics with step (t0+t)^-kappa")
    g.add_argument("--rm-t0", type=float, default=1.0)
    g.add_argument("--early-stop", action="store_true")
    g.add_argument("--remove-mean", action="store_true", help="fit patches with their mean removed")
    g.add_argument("--keep-empty", action="store_true",
                   help="average patches without observed pixels into the output as well")
    g.add_argument("--timing", action="store_true",
                   help="record wall-clock times in trace.csv (makes reruns differ)")


def recon_settings(args) -> ReconSettings:
    hyper = BpfaHyperparams(args.K, args.a, args.b, args.c, args.d, args.e, args.f)
    bs = args.batch_size if args.batch_size is not None else 2048
    schedule = BatchSchedule(batch_size=bs, epochs=args.epochs, burn_in=args.burn_in,
                             rm_kappa=args.rm_kappa, rm_t0=args.rm_t0,
                             early_stop=args.early_stop)
    return ReconSettings(args.patch_size, args.stride, hyper, schedule, Mode(args.mode),
                         args.remove_mean, not args.keep_empty)


def check_batch(args, shape):
    """An explicit batch size larger than the patch count is an error."""
    if args.batch_size is None:
        return
    h, w = shape
    n = ((h - args.patch_size) // args.stride + 1) * ((w - args.patch_size) // args.stride + 1)
    if args.batch_size > n:
        raise UsageError(f"batch size {args.batch_size} exceeds patch count {n}")


def bpfa_manifest(args, settings: ReconSettings) -> dict:
    s = settings.schedule
    return {
        "K": settings.hyper.K,
        "patch_size": settings.patch_size,
        "stride": settings.stride,
        "epochs": s.epochs,
        "batch_size": "auto" if args.batch_size is None else args.batch_size,
        "burn_in": s.burn_in,
        "mode": settings.mode.value,
        "a": settings.hyper.a, "b": settings.hyper.b, "c": settings.hyper.c,
        "d": settings.hyper.d, "e": settings.hyper.e, "f": settings.hyper.f,
        "rm_kappa": s.rm_kappa, "rm_t0": s.rm_t0,
        "early_stop": s.early_stop,
        "remove_mean": settings.remove_mean,
        "keep_empty": not settings.skip_empty,
    }


def linehop_from_args(args) -> LineHopParams:
    return LineHopParams(args.hop_amplitude, args.hop_prob, 0, not args.unidirectional)


def add_linehop_options(p):
    g = p.add_argument_group("line hop")
    g.add_argument("--hop-amplitude", type=int, default=None,
                   help="largest row deviation h (default: widest non-overlapping band)")
    g.add_argument("--hop-prob", type=float, default=LineHopParams.hop_prob)
    g.add_argument("--unidirectional", action="store_true", help="scan every line left to right")


def add_truth_options(p):
    p.add_argument("--truth", help="ground-truth image (.pgm or .raw); default is the built-in phantom")
    add_phantom_options(p, prefix="phantom-")


def add_phantom_options(p, prefix=""):
    g = p.add_argument_group("phantom")
    g.add_argument(f"--{prefix}size", type=parse_size, default=(128, 128), help="HxW (default 128x128)")
    g.add_argument(f"--{prefix}lattice", choices=["square", "hex"], default="hex")
    g.add_argument(f"--{prefix}spacing", type=float, default=8.0)
    g.add_argument(f"--{prefix}blob-width", type=float, default=1.6)
    g.add_argument(f"--{prefix}background", type=float, default=0.1)
    g.add_argument(f"--{prefix}contrast", type=float, default=0.8)


def phantom_from_args(args, prefix="") -> Image:
    get = lambda name: getattr(args, prefix + name)  # noqa: E731
    h, w = get("size")
    return lattice_phantom(h, w, get("spacing"), get("blob_width"), get("lattice"),
                           get("background"), get("contrast"))


def truth_from_args(args) -> tuple[Image, str]:
    if args.truth:
        return load_image(args.truth), args.truth
    return phantom_from_args(args, "phantom_"), "phantom"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    img = phantom_from_args(args)
    save_image(img, args.out, bits=args.bits)
    print(f"wrote {args.out} ({img.height}x{img.width})")
    return 0


def cmd_plan(args) -> int:
    scheme = Scheme(args.scheme)
    if scheme is not Scheme.RASTER and args.seed is None:
        raise UsageError(f"--seed is required for the {scheme.value} scheme")
    h, w = args.size
    plan = make_plan(scheme, h, w, args.ratio, args.dwell, args.seed or 0, linehop_from_args(args))
    write_plan(plan, args.out)
    m = plan_metrics(plan) if plan.M >= 2 else {"max_jump": 0, "mean_jump": 0.0, "overlap_count": 0}
    print(f"M={plan.M} max_jump={m['max_jump']} mean_jump={m['mean_jump']:.4f} "
          f"overlap_count={m['overlap_count']}")
    return 0


def cmd_acquire(args) -> int:
    noise_kind = NoiseKind(args.noise)
    if noise_kind is not NoiseKind.NONE and args.seed is None:
        raise UsageError("--seed is required when noise is enabled")
    truth = load_image(args.truth)
    if args.drift:
        truth = shift_image(truth, args.drift)
    plan = read_plan(args.plan)
    noise = NoiseSpec(noise_kind, args.sigma0, args.ref_dwell, args.gain, args.seed or 0)
    obs = acquire(truth, plan, noise)
    save_observation(obs, args.out_dir, {
        "command": "acquire", "truth": args.truth, "plan_file": args.plan,
        "drift": args.drift or (0, 0),
    })
    print(f"M={plan.M} dwell_us={plan.dwell!r} noise={noise_kind.value}")
    return 0


def _write_recon(args, out_dir: Path, result, extra: dict, settings) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_image(result.image, out_dir / "reconstruction.raw")
    save_image(result.image, out_dir / "reconstruction.pgm", bits=16)
    write_trace(result.trace, out_dir / "trace.csv", timing=args.timing)
    write_snapshot(result.state, out_dir / "dictionary.bpfa")
    entries = dict(extra)
    entries.update(bpfa_manifest(args, settings))
    entries.update({
        "seed": args.seed,
        "patches": result.grid.count,
        "epochs_run": len(result.trace),
        "gamma_n": float(result.state.gamma_n),
        "gamma_w": float(result.state.gamma_w),
        "atoms_pi_over_half": int((result.state.pi > 0.5).sum()),
    })
    write_manifest(out_dir / "manifest.txt", entries)


def cmd_reconstruct(args) -> int:
    obs = load_image(args.observation)
    for path in (args.mask,):
        if not Path(path).exists():
            raise UsageError(f"mask file not found: {path}")
    mask = load_mask(args.mask, obs.shape)
    if mask.shape != obs.shape:
        raise UsageError(f"mask is {mask.shape} but observation is {obs.shape}")
    check_batch(args, obs.shape)
    settings = recon_settings(args)
    result = reconstruct(obs, mask, settings, args.seed)
    extra = {"command": "reconstruct", "observation": args.observation, "mask": args.mask,
             "sampled": mask.count}
    if args.reference:
        ref = load_image(args.reference)
        extra["psnr_vs_reference"] = psnr(ref, result.image, args.peak)
        extra["psnr_zero_fill"] = psnr(ref, Image(np.where(mask.sampled, obs.data, 0.0)), args.peak)
    _write_recon(args, Path(args.out_dir), result, extra, settings)
    if args.reference:
        print(f"psnr={extra['psnr_vs_reference']:.4f} zero_fill={extra['psnr_zero_fill']:.4f}")
    print(f"wrote {args.out_dir}")
    return 0


def cmd_denoise(args) -> int:
    img = load_image(args.input)
    check_batch(args, img.shape)
    settings = recon_settings(args)
    result = reconstruct(img, Mask.full(*img.shape), settings, args.seed)
    _write_recon(args, Path(args.out_dir), result, {"command": "denoise", "input": args.input}, settings)
    print(f"wrote {args.out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    ref = load_image(args.reference)
    test = load_image(args.test)
    if args.crop_size:
        size, origin = default_crop(ref.shape, args.crop_size)
        if args.crop_origin:
            origin = args.crop_origin
        r0, c0 = origin
        crop = ref.data[r0:r0 + size, c0:c0 + size]
        if crop.shape != (size, size):
            raise UsageError("reference crop falls outside the reference image")
        value, (dr, dc) = drift_matched_psnr(crop, test, size, args.peak)
        line = f"psnr={value:.6f} offset={dr},{dc}"
        rows = ["reference,test,psnr,offset_row,offset_col",
                f"{args.reference},{args.test},{value!r},{dr},{dc}"]
    else:
        value = psnr(ref, test, args.peak)
        line = f"psnr={value:.6f}"
        rows = ["reference,test,psnr", f"{args.reference},{args.test},{value!r}"]
    print(line)
    if args.out:
        atomic_write_text(args.out, "\n".join(rows) + "\n")
    return 0


def cmd_curve(args) -> int:
    truth, source = truth_from_args(args)
    settings = recon_settings(args)
    check_batch(args, truth.shape)
    for r in args.ratios:
        if not 0 < r <= 1:
            raise UsageError(f"ratio out of range: {r}")
    schemes = [Scheme(s).value for s in args.schemes.split(",")]
    rows = run_curve(truth, args.ratios, args.seeds, schemes, settings, linehop_from_args(args),
                     args.peak)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["scheme,ratio,seed,M,psnr"] + [f"{r.scheme},{r.ratio!r},{r.seed},{r.M},{r.psnr!r}" for r in rows]
    atomic_write_text(out / "runs.csv", "\n".join(lines) + "\n")
    summary = curve_summary(rows)
    lines = ["scheme,ratio,mean_psnr,std_psnr,n"] + [f"{s},{r!r},{m!r},{sd!r},{n}" for s, r, m, sd, n in summary]
    atomic_write_text(out / "summary.csv", "\n".join(lines) + "\n")
    means = {(s, r): m for s, r, m, _, _ in summary}
    dat = ["# ratio " + " ".join(schemes)]
    for r in args.ratios:
        dat.append(f"{r!r} " + " ".join(f"{means[(s, float(r))]!r}" for s in schemes))
    atomic_write_text(out / "curve.dat", "\n".join(dat) + "\n")
    write_manifest(out / "manifest.txt", {
        "command": "curve", "truth": source, "ratios": args.ratios, "schemes": schemes,
        "seeds": args.seeds, "hop_amplitude": "auto" if args.hop_amplitude is None else args.hop_amplitude,
        "hop_prob": args.hop_prob, "serpentine": not args.unidirectional, "noise": "none",
        "peak": args.peak, **bpfa_manifest(args, settings),
    })
    for s, r, m, sd, n in summary:
        print(f"{s:8s} ratio={r:.3f} mean_psnr={m:.3f} std={sd:.3f} n={n}")
    return 0


def cmd_dose_series(args) -> int:
    truth, source = truth_from_args(args)
    settings = recon_settings(args)
    check_batch(args, truth.shape)
    for r in args.ratios:
        if not 0 < r <= 1:
            raise UsageError(f"ratio out of range: {r}")
    kind = NoiseKind(args.noise)
    noise = NoiseSpec(kind, args.sigma0, args.ref_dwell, args.gain, 0)
    budget = DoseBudget.full_raster(truth.height, truth.width, args.ref_dwell)
    size, origin = default_crop(truth.shape, args.crop_size)
    if args.crop_origin:
        origin = args.crop_origin
    rows, images = run_dose_series(truth, args.ratios, args.seeds, budget, noise, settings,
                                   linehop_from_args(args), size, origin, args.peak,
                                   keep_images=True)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed, imgs in zip(args.seeds, images):
        for ratio, img in zip(args.ratios, imgs):
            save_image(img, out / f"dose_r{round(ratio * 100):03d}_s{seed}.pgm", bits=16)
    lines = ["ratio,dwell_us,M,seed,psnr,offset_row,offset_col"]
    lines += [f"{r.ratio!r},{r.dwell!r},{r.M},{r.seed},{r.psnr!r},{r.offset[0]},{r.offset[1]}" for r in rows]
    atomic_write_text(out / "dose.csv", "\n".join(lines) + "\n")
    dwell = [r.dwell for r in rows[:len(args.ratios)]]
    write_manifest(out / "manifest.txt", {
        "command": "dose-series", "truth": source, "ratios": args.ratios, "seeds": args.seeds,
        "budget_us_px": budget.budget, "reference_dwell_us": args.ref_dwell, "dwell_us": dwell,
        "noise": kind.value, "sigma0": args.sigma0, "gain": args.gain,
        "crop_size": size, "crop_origin": origin,
        "hop_amplitude": "auto" if args.hop_amplitude is None else args.hop_amplitude,
        "hop_prob": args.hop_prob, "serpentine": not args.unidirectional, "peak": args.peak,
        **bpfa_manifest(args, settings),
    })
    for r in rows:
        print(f"seed={r.seed} ratio={r.ratio:.3f} dwell_us={r.dwell:.4f} psnr={r.psnr:.3f} "
              f"offset={r.offset[0]},{r.offset[1]}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csstem",
        description="Simulate subsampled scanning acquisition and reconstruct with BPFA.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a lattice phantom image")
    add_phantom_options(p)
    p.add_argument("--bits", type=int, choices=[8, 16], default=16)
    p.add_argument("--out", required=True, help="output .pgm or .raw")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("plan", help="generate a sampling plan")
    p.add_argument("--scheme", choices=[s.value for s in Scheme], required=True)
    p.add_argument("--ratio", type=parse_ratio, default=1.0, help="fraction or percentage, e.g. 0.25 or 25%%")
    p.add_argument("--size", type=parse_size, required=True, help="HxW")
    p.add_argument("--dwell", type=float, default=REFERENCE_DWELL_US, help="dwell time in us")
    p.add_argument("--seed", type=int, help=STOCHASTIC_HELP + " for uds and linehop")
    add_linehop_options(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("acquire", help="apply a plan to an image")
    p.add_argument("--truth", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--noise", choices=[k.value for k in NoiseKind], default="none")
    p.add_argument("--sigma0", type=float, default=0.0, help="Gaussian std at the reference dwell")
    p.add_argument("--ref-dwell", type=float, default=REFERENCE_DWELL_US)
    p.add_argument("--gain", type=float, default=1.0, help="Poisson counts per unit intensity per us")
    p.add_argument("--drift", type=parse_pair, default=None, help="shift the truth by 'row,col' first")
    p.add_argument("--seed", type=int, help=STOCHASTIC_HELP + " when noise is on")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_acquire)

    p = sub.add_parser("reconstruct", help="BPFA reconstruction of a masked observation")
    p.add_argument("--observation", required=True)
    p.add_argument("--mask", required=True, help=".pbm or a 'row,col' index list")
    p.add_argument("--reference", help="optional ground truth for PSNR reporting")
    p.add_argument("--peak", type=float, default=1.0)
    p.add_argument("--seed", type=int, required=True, help=STOCHASTIC_HELP)
    p.add_argument("--out-dir", required=True)
    add_bpfa_options(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("denoise", help="BPFA on a fully sampled image")
    p.add_argument("--input", required=True)
    p.add_argument("--seed", type=int, required=True, help=STOCHASTIC_HELP)
    p.add_argument("--out-dir", required=True)
    add_bpfa_options(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("evaluate", help="PSNR, optionally drift-matched over a crop")
    p.add_argument("--reference", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--peak", type=float, default=1.0)
    p.add_argument("--crop-size", type=int, help="enable drift matching with this crop side")
    p.add_argument("--crop-origin", type=parse_pair, help="reference crop corner 'row,col' (default centred)")
    p.add_argument("--out", help="optional CSV output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("curve", help="PSNR against sampling ratio for UDS and line hop")
    add_truth_options(p)
    p.add_argument("--ratios", type=parse_ratio_list, default=[0.1, 0.2, 0.3, 0.4, 0.5])
    p.add_argument("--schemes", default="uds,linehop")
    p.add_argument("--seeds", type=parse_seeds, required=True, help="e.g. 0-9 or 1,2,3")
    p.add_argument("--peak", type=float, default=1.0)
    p.add_argument("--out-dir", required=True)
    add_linehop_options(p)
    add_bpfa_options(p)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("dose-series", help="constrained-dose line-hop series")
    add_truth_options(p)
    p.add_argument("--ratios", type=parse_ratio_list, default=[0.5, 0.4, 0.3, 0.2, 0.1])
    p.add_argument("--ref-dwell", type=float, default=REFERENCE_DWELL_US,
                   help="dwell of the full raster that sets the budget")
    p.add_argument("--noise", choices=[k.value for k in NoiseKind], default="gaussian")
    p.add_argument("--sigma0", type=float, default=0.1)
    p.add_argument("--gain", type=float, default=1.0)
    p.add_argument("--seeds", type=parse_seeds, required=True, help="e.g. 0-9 or 1,2,3")
    p.add_argument("--crop-size", type=int, default=None)
    p.add_argument("--crop-origin", type=parse_pair, default=None)
    p.add_argument("--peak", type=float, default=1.0)
    p.add_argument("--out-dir", required=True)
    add_linehop_options(p)
    add_bpfa_options(p)
    p.set_defaults(func=cmd_dose_series)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = expand_config(argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"csstem: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return int(args.func(args) or 0)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"csstem: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"csstem: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
