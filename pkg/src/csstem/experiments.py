"""Sampling-scheme comparison and constrained-dose pipelines.

Both pipelines are built from independent (scheme, ratio, seed) runs. Each
run is deterministic given its seed, so runs may be spread over worker
processes without changing any result. ``CS_SCAN_THREADS`` caps the number
of workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .acquisition import NoiseSpec, acquire, constrained_dose_series
from .bpfa import BatchSchedule, BpfaHyperparams, Mode, inpaint
from .imaging import Image, drift_matched_psnr, psnr
from .sampling import DoseBudget, LineHopParams, Scheme, make_plan


@dataclass(frozen=True)
class ReconSettings:
    """Everything the reconstruction needs apart from data and seed."""

    patch_size: int = 8
    stride: int = 1
    hyper: BpfaHyperparams = field(default_factory=BpfaHyperparams)
    schedule: BatchSchedule = field(default_factory=lambda: BatchSchedule(batch_size=2048))
    mode: Mode = Mode.EM
    remove_mean: bool = False
    skip_empty: bool = True

    def for_patch_count(self, n_patches: int) -> "ReconSettings":
        """Clip the batch size to the number of patches available."""
        bs = self.schedule.batch_size
        if bs is not None and bs > n_patches:
            sched = BatchSchedule(**{**self.schedule.__dict__, "batch_size": n_patches})
            return ReconSettings(self.patch_size, self.stride, self.hyper, sched, self.mode,
                                 self.remove_mean, self.skip_empty)
        return self


def reconstruct(observation, mask, settings: ReconSettings, seed: int):
    h, w = observation.shape
    n_patches = ((h - settings.patch_size) // settings.stride + 1) * \
        ((w - settings.patch_size) // settings.stride + 1)
    s = settings.for_patch_count(n_patches)
    return inpaint(observation, mask, s.patch_size, s.stride, s.hyper, s.schedule, s.mode,
                   seed, s.remove_mean, s.skip_empty)


def worker_count(n_jobs: int | None = None) -> int:
    """Worker processes to use, capped by CS_SCAN_THREADS when it is set."""
    n = os.cpu_count() or 1
    env = os.environ.get("CS_SCAN_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ValueError(f"CS_SCAN_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise ValueError("CS_SCAN_THREADS must be >= 1")
        n = min(n, cap)
    if n_jobs is not None:
        n = min(n, max(n_jobs, 1))
    return n


def _map(fn, jobs, workers: int | None):
    jobs = list(jobs)
    workers = worker_count(len(jobs)) if workers is None else workers
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


# ---------------------------------------------------------------------------
# PSNR-versus-ratio curve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurveRow:
    scheme: str
    ratio: float
    seed: int
    psnr: float
    M: int


def _curve_job(job):
    truth, scheme, ratio, seed, settings, linehop, peak = job
    plan = make_plan(scheme, truth.height, truth.width, ratio, seed=seed, linehop=linehop)
    obs = acquire(truth, plan)
    res = reconstruct(obs.image, obs.mask, settings, seed)
    return CurveRow(Scheme(scheme).value, float(ratio), int(seed), psnr(truth, res.image, peak), plan.M)


def run_curve(truth: Image, ratios, seeds, schemes=("uds", "linehop"),
              settings: ReconSettings | None = None, linehop: LineHopParams | None = None,
              peak: float = 1.0, workers: int | None = None) -> list[CurveRow]:
    """Reconstruction PSNR for every (scheme, ratio, seed), noise-free.

    Plans and the reconstruction share the run seed. Rows come back ordered
    by scheme, then ratio, then seed.
    """
    settings = settings or ReconSettings()
    seeds = list(seeds)
    if not seeds:
        raise ValueError("seed list is empty")
    jobs = [(truth, s, float(r), int(sd), settings, linehop, peak)
            for s in schemes for r in ratios for sd in seeds]
    return _map(_curve_job, jobs, workers)


def curve_summary(rows) -> list[tuple[str, float, float, float, int]]:
    """(scheme, ratio, mean, std, n) per scheme and ratio, in first-seen order."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.scheme, r.ratio), []).append(r.psnr)
    out = []
    for (scheme, ratio), vals in groups.items():
        v = np.asarray(vals)
        out.append((scheme, ratio, float(v.mean()), float(v.std()), len(v)))
    return out


# ---------------------------------------------------------------------------
# constrained-dose series
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DoseRow:
    ratio: float
    dwell: float
    M: int
    seed: int
    psnr: float
    offset: tuple[int, int]


def default_crop(shape, crop_size: int | None = None) -> tuple[int, tuple[int, int]]:
    """Centred square crop, half the shorter side unless given."""
    h, w = shape
    size = crop_size or min(h, w) // 2
    if size > min(h, w):
        raise ValueError("crop larger than image")
    return size, ((h - size) // 2, (w - size) // 2)


def _dose_job(job):
    truth, ratios, budget, linehop, noise, seed, settings, crop_size, crop_origin, peak = job
    series = constrained_dose_series(truth, ratios, budget, linehop, noise, seed)
    r0, c0 = crop_origin
    ref = truth.data[r0:r0 + crop_size, c0:c0 + crop_size]
    rows, images = [], []
    for i, el in enumerate(series):
        res = reconstruct(el.observation.image, el.observation.mask, settings, seed * 1000 + i)
        val, off = drift_matched_psnr(ref, res.image, crop_size, peak)
        rows.append(DoseRow(el.ratio, el.dwell, el.observation.plan.M, seed, val, off))
        images.append(res.image)
    return rows, images


def run_dose_series(truth: Image, ratios, seeds, budget: DoseBudget | None = None,
                    noise: NoiseSpec | None = None, settings: ReconSettings | None = None,
                    linehop: LineHopParams | None = None, crop_size: int | None = None,
                    crop_origin: tuple[int, int] | None = None, peak: float = 1.0,
                    workers: int | None = None, keep_images: bool = False):
    """Reconstruct constrained-dose line-hop series and score them by drift-matched PSNR.

    Parameters
    ----------
    truth : Image
    ratios : sequence of float
    seeds : sequence of int
        One full series per seed.
    budget : DoseBudget, optional
        Defaults to a 4 us full raster of ``truth``.
    noise : NoiseSpec, optional
        Defaults to no noise.
    settings : ReconSettings, optional
    linehop : LineHopParams, optional
    crop_size : int, optional
        Side of the reference crop, default half the image.
    crop_origin : (int, int), optional
        Reference crop corner in ``truth``, default centred.
    peak : float
    workers : int, optional
    keep_images : bool
        Also return the reconstructions, as a list per seed.

    Returns
    -------
    rows : list of DoseRow, ordered by seed then ratio
    images : list of list of Image, only when ``keep_images``
    """
    budget = budget or DoseBudget.full_raster(truth.height, truth.width)
    settings = settings or ReconSettings()
    size, origin = default_crop(truth.shape, crop_size)
    if crop_origin is not None:
        origin = tuple(int(v) for v in crop_origin)
        if origin[0] + size > truth.height or origin[1] + size > truth.width or min(origin) < 0:
            raise ValueError("reference crop falls outside the image")
    seeds = list(seeds)
    if not seeds:
        raise ValueError("seed list is empty")
    jobs = [(truth, list(ratios), budget, linehop, noise, int(sd), settings, size, origin, peak)
            for sd in seeds]
    out = _map(_dose_job, jobs, workers)
    rows = [r for rs, _ in out for r in rs]
    if keep_images:
        return rows, [imgs for _, imgs in out]
    return rows
