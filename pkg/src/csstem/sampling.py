"""Probe sampling plans (raster, uniform random, line hop), plan metrics and dose budgets.

Random plans use numpy's PCG64 generator seeded directly with the plan seed,
so a seed fixes a plan bit-for-bit on every platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from ._fileio import atomic_write_text
from .imaging import Mask, parse_positions

RNG_NAME = "PCG64"
REFERENCE_DWELL_US = 4.0


class Scheme(str, Enum):
    RASTER = "raster"
    UDS = "uds"
    LINEHOP = "linehop"


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def check_ratio(ratio: float) -> float:
    ratio = float(ratio)
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio out of range: {ratio} (expected 0 < ratio <= 1)")
    return ratio


@dataclass(frozen=True)
class SamplingPlan:
    """Ordered probe positions with a common dwell time.

    Attributes
    ----------
    height, width : int
    positions : ndarray of int64, shape (M, 2)
        (row, col) pairs in traversal order.
    dwell : float
        Dwell time per position in microseconds.
    scheme : Scheme
    seed : int or None
        Seed used to generate the plan, None for deterministic schemes.
    """

    height: int
    width: int
    positions: np.ndarray = field(repr=False)
    dwell: float = REFERENCE_DWELL_US
    scheme: Scheme = Scheme.RASTER
    seed: int | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)
        if len(pos) and (pos.min() < 0 or pos[:, 0].max() >= self.height
                         or pos[:, 1].max() >= self.width):
            raise ValueError("plan position out of bounds")
        if len(pos) > self.height * self.width:
            raise ValueError("plan has more positions than pixels")
        if not self.dwell > 0:
            raise ValueError("dwell time must be positive")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def M(self) -> int:
        return len(self.positions)

    @property
    def ratio(self) -> float:
        return self.M / (self.height * self.width)

    def to_mask(self) -> Mask:
        return Mask.from_positions(self.height, self.width, self.positions)

    def with_dwell(self, dwell: float) -> "SamplingPlan":
        return SamplingPlan(self.height, self.width, self.positions, dwell, self.scheme, self.seed)


@dataclass(frozen=True)
class LineHopParams:
    """Line-hop settings.

    Attributes
    ----------
    amplitude : int or None
        Largest row deviation h from each base line. None picks the widest
        band that keeps neighbouring bands apart.
    hop_prob : float
        Chance, per column step, that the row offset moves by one.
    seed : int
    serpentine : bool
        Reverse the column order on every other line.
    """

    amplitude: int | None = None
    hop_prob: float = 1.0
    seed: int = 0
    serpentine: bool = True

    def __post_init__(self):
        if self.amplitude is not None and self.amplitude < 0:
            raise ValueError("hop amplitude must be >= 0")
        if not 0.0 <= self.hop_prob <= 1.0:
            raise ValueError("hop probability must lie in [0, 1]")


@dataclass(frozen=True)
class DoseBudget:
    """Total dose proxy, dwell time times number of probe positions."""

    reference_dwell: float
    reference_M: float

    def __post_init__(self):
        if not (self.reference_dwell > 0 and self.reference_M > 0):
            raise ValueError("dose budget must be positive")

    @property
    def budget(self) -> float:
        return self.reference_dwell * self.reference_M

    @classmethod
    def full_raster(cls, height: int, width: int, dwell: float = REFERENCE_DWELL_US) -> "DoseBudget":
        return cls(dwell, height * width)


def raster_plan(height: int, width: int, dwell: float = REFERENCE_DWELL_US,
                serpentine: bool = False) -> SamplingPlan:
    """Visit every pixel, row by row."""
    if height < 1 or width < 1:
        raise ValueError("image dimensions must be >= 1")
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    if serpentine:
        cc[1::2] = cc[1::2, ::-1]
    pos = np.stack([rr.ravel(), cc.ravel()], axis=1)
    return SamplingPlan(height, width, pos, dwell, Scheme.RASTER, None)


def uds_plan(height: int, width: int, ratio: float, dwell: float = REFERENCE_DWELL_US,
             seed: int = 0) -> SamplingPlan:
    """Uniform density sampling: round(ratio * N) distinct pixels drawn uniformly.

    Positions are returned in row-major order.
    """
    ratio = check_ratio(ratio)
    n = height * width
    m = max(1, round_half_up(ratio * n))
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(n, size=m, replace=False))
    pos = np.stack(np.divmod(flat, width), axis=1)
    return SamplingPlan(height, width, pos, dwell, Scheme.UDS, seed)


def linehop_base_rows(height: int, n_lines: int) -> np.ndarray:
    """Evenly spaced base rows, each centred in its share of the image height."""
    return np.floor((np.arange(n_lines) + 0.5) * height / n_lines).astype(np.int64)


def widest_amplitude(height: int, n_lines: int) -> int:
    """Largest h for which ``n_lines`` evenly spaced bands of half-width h stay disjoint."""
    if n_lines <= 1:
        return max((height - 1) // 2, 0)
    return int((np.diff(linehop_base_rows(height, n_lines)).min() - 1) // 2)


def linehop_plan(height: int, width: int, ratio: float, params: LineHopParams | None = None,
                 dwell: float = REFERENCE_DWELL_US) -> SamplingPlan:
    """Line-hop plan.

    ``L = round(ratio * H)`` base lines are spread evenly over the image. Along
    each line the probe visits every column once; its row offset follows a
    +/-1 random walk, moving with probability ``hop_prob`` per column and
    clamped to ``[-h, h]``. Lines must be more than ``2h`` rows apart so the
    bands never touch, which makes all positions unique.

    Parameters
    ----------
    height, width : int
    ratio : float
        Target sampling fraction in (0, 1].
    params : LineHopParams, optional
    dwell : float

    Returns
    -------
    SamplingPlan
        ``L * W`` positions in traversal order.
    """
    params = params or LineHopParams()
    ratio = check_ratio(ratio)
    n_lines = round_half_up(ratio * height)
    if n_lines < 1:
        raise ValueError(f"ratio {ratio} gives no scan lines for height {height}")
    h = widest_amplitude(height, n_lines) if params.amplitude is None else params.amplitude
    base = linehop_base_rows(height, n_lines)
    if n_lines > 1 and np.diff(base).min() <= 2 * h:
        raise ValueError(
            f"line bands overlap: spacing {np.diff(base).min()} must exceed 2*h = {2 * h}"
        )
    lo = np.maximum(base - h, 0) - base
    hi = np.minimum(base + h, height - 1) - base

    rng = np.random.default_rng(params.seed)
    move = rng.random((n_lines, max(width - 1, 0))) < params.hop_prob
    step = np.where(rng.random((n_lines, max(width - 1, 0))) < 0.5, -1, 1)
    offset = np.zeros((n_lines, width), dtype=np.int64)
    for c in range(1, width):
        nxt = offset[:, c - 1] + np.where(move[:, c - 1], step[:, c - 1], 0)
        offset[:, c] = np.clip(nxt, lo, hi)

    rows = base[:, None] + offset
    cols = np.broadcast_to(np.arange(width), rows.shape).copy()
    if params.serpentine:
        rows[1::2] = rows[1::2, ::-1]
        cols[1::2] = cols[1::2, ::-1]
    pos = np.stack([rows.ravel(), cols.ravel()], axis=1)
    return SamplingPlan(height, width, pos, dwell, Scheme.LINEHOP, params.seed)


def plan_metrics(plan: SamplingPlan) -> dict:
    """Jump statistics and overlap count for a plan.

    Jumps are Chebyshev distances between consecutive positions, which is how
    far the scan coils have to deflect along the worse axis.
    """
    if plan.M < 2:
        raise ValueError("plan needs at least two positions")
    d = np.abs(np.diff(plan.positions, axis=0)).max(axis=1)
    unique = len(np.unique(plan.positions[:, 0] * plan.width + plan.positions[:, 1]))
    return {
        "max_jump": int(d.max()),
        "mean_jump": float(d.mean()),
        "overlap_count": int(plan.M - unique),
    }


def constrained_dwell(budget: DoseBudget, M: float) -> float:
    """Dwell time that spends the whole budget over ``M`` positions."""
    if not M >= 1:
        raise ValueError("M must be >= 1")
    return budget.budget / M


def make_plan(scheme, height: int, width: int, ratio: float = 1.0,
              dwell: float = REFERENCE_DWELL_US, seed: int = 0,
              linehop: LineHopParams | None = None) -> SamplingPlan:
    scheme = Scheme(scheme)
    if scheme is Scheme.RASTER:
        return raster_plan(height, width, dwell)
    if scheme is Scheme.UDS:
        return uds_plan(height, width, ratio, dwell, seed)
    params = linehop or LineHopParams()
    params = LineHopParams(params.amplitude, params.hop_prob, seed, params.serpentine)
    return linehop_plan(height, width, ratio, params, dwell)


def format_plan(plan: SamplingPlan) -> str:
    seed = "none" if plan.seed is None else str(plan.seed)
    lines = [f"{plan.height} {plan.width} {plan.M} {plan.dwell!r} {plan.scheme.value} {seed}"]
    lines += [f"{r},{c}" for r, c in plan.positions]
    return "\n".join(lines) + "\n"


def write_plan(plan: SamplingPlan, path) -> None:
    """Header 'H W M t_d scheme seed', then one 'row,col' line per position."""
    atomic_write_text(path, format_plan(plan))


def read_plan(path) -> SamplingPlan:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty plan file")
    head = lines[0].split()
    if len(head) != 6:
        raise ValueError(f"{path}: header must be 'H W M t_d scheme seed'")
    h, w, m = int(head[0]), int(head[1]), int(head[2])
    seed = None if head[5] == "none" else int(head[5])
    pos = parse_positions(lines[1:], str(path))
    if len(pos) != m:
        raise ValueError(f"{path}: header says M={m} but {len(pos)} positions follow")
    return SamplingPlan(h, w, pos, float(head[3]), Scheme(head[4]), seed)
