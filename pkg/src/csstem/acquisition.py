"""Simulated compressive acquisition: masking, dwell-dependent noise and dose series."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from ._fileio import write_manifest
from .imaging import Image, Mask, write_index_list, write_pbm, write_raw
from .sampling import (
    DoseBudget,
    LineHopParams,
    SamplingPlan,
    constrained_dwell,
    linehop_plan,
    write_plan,
)


class NoiseKind(str, Enum):
    NONE = "none"
    GAUSSIAN = "gaussian"
    POISSON = "poisson"


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement noise model.

    Attributes
    ----------
    kind : NoiseKind
    sigma0 : float
        Gaussian standard deviation at ``reference_dwell``. The standard
        deviation at dwell ``t`` is ``sigma0 * sqrt(reference_dwell / t)``.
    reference_dwell : float
        Microseconds.
    gain : float
        Poisson mode only: expected counts per unit intensity per microsecond.
    seed : int
    """

    kind: NoiseKind = NoiseKind.NONE
    sigma0: float = 0.0
    reference_dwell: float = 4.0
    gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")
        if not (self.reference_dwell > 0 and self.gain > 0):
            raise ValueError("reference dwell and gain must be positive")

    def sigma_at(self, dwell: float) -> float:
        return self.sigma0 * np.sqrt(self.reference_dwell / dwell)

    def with_seed(self, seed: int) -> "NoiseSpec":
        return NoiseSpec(self.kind, self.sigma0, self.reference_dwell, self.gain, seed)


@dataclass(frozen=True)
class Observation:
    """Zero-filled measurement together with how it was taken."""

    image: Image
    mask: Mask
    plan: SamplingPlan
    noise: NoiseSpec


def acquire(truth, plan: SamplingPlan, noise: NoiseSpec | None = None) -> Observation:
    """Measure ``truth`` at the plan positions.

    Sampled pixels carry the true value plus a noise draw; every other pixel
    is exactly zero. Noise draws follow plan order, so they are tied to the
    seed and the plan rather than to pixel layout.
    """
    noise = noise or NoiseSpec()
    data = truth.data if isinstance(truth, Image) else np.asarray(truth, dtype=np.float64)
    if data.shape != (plan.height, plan.width):
        raise ValueError(f"plan is {plan.height}x{plan.width} but image is {data.shape}")
    r, c = plan.positions[:, 0], plan.positions[:, 1]
    vals = data[r, c].astype(np.float64)
    rng = np.random.default_rng(noise.seed)
    if noise.kind is NoiseKind.GAUSSIAN:
        vals = vals + noise.sigma_at(plan.dwell) * rng.standard_normal(vals.shape)
    elif noise.kind is NoiseKind.POISSON:
        if np.any(vals < 0):
            raise ValueError("Poisson noise needs non-negative intensities")
        scale = plan.dwell * noise.gain
        vals = rng.poisson(vals * scale) / scale
    out = np.zeros_like(data, dtype=np.float64)
    out[r, c] = vals
    return Observation(Image(out), plan.to_mask(), plan, noise)


@dataclass(frozen=True)
class SeriesElement:
    ratio: float
    dwell: float
    observation: Observation


def element_seeds(seed: int, index: int) -> tuple[int, int]:
    """Independent (plan, noise) seeds for one series element."""
    ss = np.random.SeedSequence([seed, index])
    a, b = ss.generate_state(2)
    return int(a), int(b)


def constrained_dose_series(truth, ratios, budget: DoseBudget,
                            params: LineHopParams | None = None,
                            noise: NoiseSpec | None = None, seed: int = 0) -> list[SeriesElement]:
    """Line-hop acquisitions that all spend the same dose.

    For each ratio a line-hop plan is built, its dwell time is set to
    ``budget / M`` and the image is acquired. Each element draws from its own
    seed derived from ``(seed, index)``, so elements can be produced in any
    order.

    Parameters
    ----------
    truth : Image
    ratios : sequence of float
    budget : DoseBudget
    params : LineHopParams, optional
        Hop amplitude, probability and traversal. Its seed is replaced.
    noise : NoiseSpec, optional
        Its seed is replaced per element.
    seed : int

    Returns
    -------
    list of SeriesElement, in the order of ``ratios``.
    """
    ratios = list(ratios)
    if not ratios:
        raise ValueError("ratio list is empty")
    params = params or LineHopParams()
    noise = noise or NoiseSpec()
    h, w = truth.shape
    out = []
    for i, ratio in enumerate(ratios):
        plan_seed, noise_seed = element_seeds(seed, i)
        lp = LineHopParams(params.amplitude, params.hop_prob, plan_seed, params.serpentine)
        plan = linehop_plan(h, w, ratio, lp)
        plan = plan.with_dwell(constrained_dwell(budget, plan.M))
        obs = acquire(truth, plan, noise.with_seed(noise_seed))
        out.append(SeriesElement(float(ratio), plan.dwell, obs))
    return out


def shift_image(image, offset: tuple[int, int]) -> Image:
    """Translate by an integer offset, repeating edge pixels into the gap.

    Only meant for exercising drift-matched PSNR; acquisition never drifts on
    its own.
    """
    data = image.data if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    dr, dc = (int(v) for v in offset)
    pr, pc = abs(dr), abs(dc)
    padded = np.pad(data, ((pr, pr), (pc, pc)), mode="edge")
    h, w = data.shape
    return Image(padded[pr - dr:pr - dr + h, pc - dc:pc - dc + w].copy())


def save_observation(obs: Observation, out_dir, extra: dict | None = None) -> dict:
    """Write observation.raw, mask.pbm, mask.txt, plan.txt and manifest.txt.

    Returns the manifest entries.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_raw(obs.image, out / "observation.raw")
    write_pbm(obs.mask, out / "mask.pbm")
    write_index_list(obs.mask, out / "mask.txt")
    write_plan(obs.plan, out / "plan.txt")
    entries = {
        "height": obs.plan.height,
        "width": obs.plan.width,
        "scheme": obs.plan.scheme.value,
        "M": obs.plan.M,
        "ratio": obs.plan.ratio,
        "dwell_us": obs.plan.dwell,
        "plan_seed": obs.plan.seed,
        "noise": obs.noise.kind.value,
        "sigma0": obs.noise.sigma0,
        "reference_dwell_us": obs.noise.reference_dwell,
        "gain": obs.noise.gain,
        "noise_seed": obs.noise.seed,
        "rng": "PCG64",
    }
    entries.update(extra or {})
    write_manifest(out / "manifest.txt", entries)
    return entries
