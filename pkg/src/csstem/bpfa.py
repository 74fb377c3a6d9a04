"""Beta process factor analysis (BPFA) for masked image patches.

Model, for patch i with observed pixel set Omega_i::

    y_i = P_i D (z_i * w_i) + n_i,      n_i ~ N(0, 1/gamma_n)
    d_k ~ N(0, B^-2 I),                 w_ik ~ N(0, 1/gamma_w)
    z_ik ~ Bernoulli(pi_k),             pi_k ~ Beta(a/K, b(K-1)/K)
    gamma_n ~ Gamma(c, d),              gamma_w ~ Gamma(e, f)

Inference runs stochastic mini-batch EM. Each batch gets an E-step over its
patches (supports and weights) followed by an M-step on the dictionary, atom
probabilities and precisions, using sufficient statistics scaled by
N_p / N_b. A few opening epochs sample every quantity instead of taking
posterior modes. This gives the dictionary a chance to take shape before the
deterministic updates start.

The single-variable conditionals are also exposed (``weight_conditional``,
``atom_pixel_conditional``, ``pi_posterior`` and so on) so they can be
checked in isolation.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from ._estep import estep
from ._fileio import atomic_write_text, atomic_write_bytes
from .imaging import Image, Mask, PatchGrid, PatchSet, extract_patches, reassemble

SNAPSHOT_MAGIC = b"BPFA"
LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(RuntimeError):
    """Raised when inference produces a non-finite objective."""


class Mode(str, Enum):
    EM = "em"
    GIBBS = "gibbs"


@dataclass(frozen=True)
class BpfaHyperparams:
    """Prior settings.

    ``pi_k ~ Beta(a/K, b(K-1)/K)``, ``gamma_n ~ Gamma(c, d)`` and
    ``gamma_w ~ Gamma(e, f)`` (shape, rate).
    """

    K: int = 64
    a: float = 1.0
    b: float = 1.0
    c: float = 1e-6
    d: float = 1e-6
    e: float = 1e-6
    f: float = 1e-6

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 2:
            raise ValueError("K must be an integer >= 2 (the Beta prior is improper for K = 1)")
        for name in "abcdef":
            if not getattr(self, name) > 0:
                raise ValueError(f"hyperparameter {name} must be positive")

    @property
    def beta_prior(self) -> tuple[float, float]:
        return self.a / self.K, self.b * (self.K - 1) / self.K

    @property
    def prior_pi(self) -> float:
        a0, b0 = self.beta_prior
        return a0 / (a0 + b0)


@dataclass(frozen=True)
class BatchSchedule:
    """How patches are visited.

    Attributes
    ----------
    batch_size : int or None
        Patches per mini-batch, None for the full set.
    epochs : int
    burn_in : int
        Opening epochs that sample supports, weights and the dictionary
        (EM mode only; Gibbs mode samples throughout). At the switch to
        deterministic updates the atom probabilities are reset to their prior
        mean, so each atom has to earn its place again.
    shuffle_seed : int or None
        Separate seed for batch shuffling. None shares the inference stream.
    rm_kappa, rm_t0 : float or None, float
        When ``rm_kappa`` is set, batch statistics are blended into a running
        average with step ``(rm_t0 + t) ** -rm_kappa`` instead of replacing
        it.
    early_stop : bool
        Stop when the objective moves by less than ``tol`` (relative) over
        ``patience`` epochs.
    """

    batch_size: int | None = None
    epochs: int = 60
    burn_in: int = 3
    shuffle_seed: int | None = None
    rm_kappa: float | None = None
    rm_t0: float = 1.0
    early_stop: bool = False
    tol: float = 1e-5
    patience: int = 5

    def __post_init__(self):
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0 or self.burn_in < 0:
            raise ValueError("epochs and burn_in must be >= 0")
        if self.rm_kappa is not None and not (0.5 < self.rm_kappa <= 1.0):
            raise ValueError("rm_kappa must lie in (0.5, 1]")
        if self.rm_t0 < 0:
            raise ValueError("rm_t0 must be >= 0")

    def n_batches(self, n_patches: int) -> int:
        size = n_patches if self.batch_size is None else self.batch_size
        if size > n_patches:
            raise ValueError(f"batch size {size} exceeds patch count {n_patches}")
        return -(-n_patches // size)


@dataclass
class BpfaState:
    """Current values of every model quantity.

    Attributes
    ----------
    D : ndarray, shape (B*B, K)
        Dictionary, one atom per column.
    z : ndarray of bool, shape (N_p, K)
    w : ndarray, shape (N_p, K)
    pi : ndarray, shape (K,)
    gamma_n, gamma_w : float
    rng : numpy Generator
    """

    D: np.ndarray
    z: np.ndarray
    w: np.ndarray
    pi: np.ndarray
    gamma_n: float
    gamma_w: float
    rng: np.random.Generator = field(repr=False)

    @property
    def K(self) -> int:
        return self.D.shape[1]

    @property
    def patch_size(self) -> int:
        return math.isqrt(self.D.shape[0])

    @property
    def atoms(self) -> np.ndarray:
        """Atoms as rows, shape (K, B*B)."""
        return self.D.T

    @property
    def alpha(self) -> np.ndarray:
        """Sparse codes z * w, the only coefficients used downstream."""
        return np.where(self.z, self.w, 0.0)

    def copy(self) -> "BpfaState":
        rng = np.random.Generator(type(self.rng.bit_generator)())
        rng.bit_generator.state = self.rng.bit_generator.state
        return BpfaState(self.D.copy(), self.z.copy(), self.w.copy(), self.pi.copy(),
                         self.gamma_n, self.gamma_w, rng)


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    objective: float
    active_atoms: int
    mean_pi: float
    wall_ms: float


def _patch_arrays(patches, observed=None) -> tuple[np.ndarray, np.ndarray]:
    """Return zero-filled values and 0/1 float flags as contiguous arrays."""
    if isinstance(patches, PatchSet):
        Y, Mb = patches.values, patches.observed
    else:
        Y = np.asarray(patches, dtype=np.float64)
        Mb = np.ones(Y.shape, bool) if observed is None else np.asarray(observed, bool)
    if Y.ndim != 2 or Y.shape != Mb.shape:
        raise ValueError("patch values and flags must be equal-shaped 2-D arrays")
    P = Y.shape[1]
    if math.isqrt(P) ** 2 != P:
        raise ValueError(f"patch length {P} is not a square")
    Mf = Mb.astype(np.float64)
    Y = np.where(Mb, Y, 0.0)
    if not np.all(np.isfinite(Y)):
        raise ValueError("non-finite observed patch values")
    return np.ascontiguousarray(Y), np.ascontiguousarray(Mf)


def init_state(patches, hyper: BpfaHyperparams, seed: int, observed=None) -> BpfaState:
    """Starting state.

    Atoms are drawn from ``N(0, B^-2 I)``, supports and weights start at
    zero, ``pi`` at its prior mean and the precisions at their prior means.
    """
    Y, _ = _patch_arrays(patches, observed)
    n, P = Y.shape
    B = math.isqrt(P)
    rng = np.random.default_rng(seed)
    D = rng.normal(0.0, 1.0 / B, size=(P, hyper.K))
    return BpfaState(
        D=D,
        z=np.zeros((n, hyper.K), dtype=bool),
        w=np.zeros((n, hyper.K)),
        pi=np.full(hyper.K, hyper.prior_pi),
        gamma_n=hyper.c / hyper.d,
        gamma_w=hyper.e / hyper.f,
        rng=rng,
    )


# ---------------------------------------------------------------------------
# single-variable conditionals
# ---------------------------------------------------------------------------

def weight_conditional(y, m, D, alpha_i, k: int, gamma_n: float, gamma_w: float):
    """Conditional of one weight given everything else in its patch.

    Parameters
    ----------
    y, m : ndarray, shape (P,)
        Patch values and 0/1 observation flags.
    D : ndarray, shape (P, K)
    alpha_i : ndarray, shape (K,)
        Current codes z_i * w_i of the patch.
    k : int
    gamma_n, gamma_w : float

    Returns
    -------
    mean, precision : float
        Gaussian posterior of w_ik when z_ik = 1.
    delta : float
        Log Bayes factor for z_ik = 1 against z_ik = 0. The log odds of
        z_ik = 1 are ``logit(pi_k) + delta``.
    """
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    dt = m * D[:, k]
    r = m * (y - D @ alpha_i) + dt * alpha_i[k]
    nrm = float(dt @ dt)
    prec = gamma_w + gamma_n * nrm
    proj = float(dt @ r)
    mean = gamma_n * proj / prec
    delta = 0.5 * math.log(gamma_w / prec) + gamma_n ** 2 * proj ** 2 / (2.0 * prec)
    return mean, prec, delta


def update_support_weight(state: BpfaState, patches, i: int, k: int, mode=Mode.GIBBS,
                          observed=None) -> tuple[bool, float]:
    """Single-site update of (z_ik, w_ik) from their joint conditional.

    The batch engine uses a blocked version of the same conditional; this
    function is the one-variable reference form.
    """
    Y, Mf = _patch_arrays(patches, observed)
    mean, prec, delta = weight_conditional(Y[i], Mf[i], state.D, state.alpha[i], k,
                                           state.gamma_n, state.gamma_w)
    pk = state.pi[k]
    lo = math.log(pk / (1.0 - pk)) + delta
    if Mode(mode) is Mode.EM:
        z = lo > 0
        w = mean if z else 0.0
    else:
        z = bool(state.rng.random() < 1.0 / (1.0 + math.exp(-lo)))
        w = mean + state.rng.standard_normal() / math.sqrt(prec) if z \
            else state.rng.standard_normal() / math.sqrt(state.gamma_w)
    state.z[i, k] = z
    state.w[i, k] = w
    return bool(z), float(w)


def atom_pixel_conditional(state: BpfaState, patches, k: int, p: int, batch=None,
                           scale: float = 1.0, observed=None) -> tuple[float, float]:
    """Conditional of one dictionary entry d_pk given all other quantities.

    Returns
    -------
    mean, precision : float
    """
    Y, Mf = _patch_arrays(patches, observed)
    idx = np.arange(len(Y)) if batch is None else np.asarray(batch)
    A = state.alpha[idx]
    y, m = Y[idx, p], Mf[idx, p]
    a_k = A[:, k]
    resid = y - A @ state.D[p] + a_k * state.D[p, k]
    P = state.D.shape[0]
    prec = P + state.gamma_n * scale * float(np.sum(m * a_k * a_k))
    mean = state.gamma_n * scale * float(np.sum(m * a_k * resid)) / prec
    return mean, prec


def dictionary_posterior(b, H, gamma_n: float, scale: float = 1.0):
    """Joint Gaussian posterior of every dictionary row.

    Parameters
    ----------
    b : ndarray, shape (P, K)
        ``sum_i m_ip y_ip E[alpha_i]``.
    H : ndarray, shape (P, K, K)
        ``sum_i m_ip E[alpha_i alpha_i^T]``.

    Returns
    -------
    mean : ndarray, shape (P, K)
    precision : ndarray, shape (P, K, K)
    """
    P, K = b.shape
    prec = P * np.eye(K)[None] + scale * gamma_n * H
    mean = np.linalg.solve(prec, (scale * gamma_n * b)[:, :, None])[:, :, 0]
    return mean, prec


def _sample_rows(mean, prec, rng):
    L = np.linalg.cholesky(prec)
    xi = rng.standard_normal(mean.shape)
    return mean + np.linalg.solve(np.transpose(L, (0, 2, 1)), xi[:, :, None])[:, :, 0]


def _plugin_stats(Y, Mf, alpha):
    b = (Y.T @ alpha)
    H = np.einsum("ip,ik,ij->pkj", Mf, alpha, alpha)
    return b, H


def update_dictionary(state: BpfaState, patches, batch=None, mode=Mode.EM, observed=None) -> np.ndarray:
    """Refresh D from the current codes of the patches in ``batch``.

    Rows of D are updated jointly, which is equivalent to cycling the
    single-entry conditionals to convergence. Statistics are scaled by
    N_p / N_b.
    """
    Y, Mf = _patch_arrays(patches, observed)
    idx = np.arange(len(Y)) if batch is None else np.asarray(batch)
    if len(idx) == 0:
        raise ValueError("batch is empty")
    scale = len(Y) / len(idx)
    b, H = _plugin_stats(Y[idx], Mf[idx], state.alpha[idx])
    mean, prec = dictionary_posterior(b, H, state.gamma_n, scale)
    state.D = mean if Mode(mode) is Mode.EM else _sample_rows(mean, prec, state.rng)
    return state.D


def pi_posterior(z_sum, n_patches: float, hyper: BpfaHyperparams, scale: float = 1.0):
    """Beta parameters of each pi_k given support counts."""
    a0, b0 = hyper.beta_prior
    zs = scale * np.asarray(z_sum, dtype=np.float64)
    return a0 + zs, b0 + n_patches - zs


def update_pi(state: BpfaState, hyper: BpfaHyperparams, batch=None, mode=Mode.EM) -> np.ndarray:
    n = len(state.z)
    idx = np.arange(n) if batch is None else np.asarray(batch)
    alpha, beta = pi_posterior(state.z[idx].sum(0), n, hyper, n / len(idx))
    if Mode(mode) is Mode.EM:
        state.pi = alpha / (alpha + beta)
    else:
        state.pi = state.rng.beta(alpha, beta)
    state.pi = np.clip(state.pi, 1e-300, 1.0 - 1e-16)
    return state.pi


def noise_precision_posterior(sse: float, n_obs: float, hyper: BpfaHyperparams, scale: float = 1.0):
    """Gamma (shape, rate) of gamma_n given the residual sum of squares."""
    return hyper.c + 0.5 * scale * n_obs, hyper.d + 0.5 * scale * sse


def weight_precision_posterior(n_active: float, sum_w2: float, hyper: BpfaHyperparams,
                               scale: float = 1.0):
    """Gamma (shape, rate) of gamma_w given the active weights."""
    return hyper.e + 0.5 * scale * n_active, hyper.f + 0.5 * scale * sum_w2


def update_precisions(state: BpfaState, patches, hyper: BpfaHyperparams, batch=None,
                      mode=Mode.EM, observed=None) -> tuple[float, float]:
    Y, Mf = _patch_arrays(patches, observed)
    idx = np.arange(len(Y)) if batch is None else np.asarray(batch)
    scale = len(Y) / len(idx)
    A = state.alpha[idx]
    R = Mf[idx] * (Y[idx] - A @ state.D.T)
    sn, rn = noise_precision_posterior(float(np.sum(R * R)), float(Mf[idx].sum()), hyper, scale)
    sw, rw = weight_precision_posterior(float(state.z[idx].sum()), float(np.sum(A * A)), hyper, scale)
    if Mode(mode) is Mode.EM:
        state.gamma_n, state.gamma_w = sn / rn, sw / rw
    else:
        state.gamma_n = float(state.rng.gamma(sn, 1.0 / rn))
        state.gamma_w = float(state.rng.gamma(sw, 1.0 / rw))
    return state.gamma_n, state.gamma_w


# ---------------------------------------------------------------------------
# batch engine
# ---------------------------------------------------------------------------

@dataclass
class SuffStats:
    """Expected sufficient statistics of a set of patches.

    ``b`` and ``H`` are per-pixel moments of the codes, ``yy`` the per-pixel
    observed energy, ``n`` the observed pixel count, ``zsum`` the per-atom
    usage, ``ew2`` the summed E[w^2] over active pairs, ``logdet`` the summed
    log det of the weight posteriors, ``nact`` the number of active pairs and
    ``count`` the number of patches.
    """

    b: np.ndarray
    H: np.ndarray
    yy: np.ndarray
    n: float
    zsum: np.ndarray
    ew2: float
    logdet: float
    nact: float
    count: float

    def scaled(self, s: float) -> "SuffStats":
        return SuffStats(self.b * s, self.H * s, self.yy * s, self.n * s, self.zsum * s,
                         self.ew2 * s, self.logdet * s, self.nact * s, self.count * s)

    def blend(self, other: "SuffStats", rho: float) -> "SuffStats":
        """Return (1 - rho) * self + rho * other."""
        mix = lambda x, y: (1.0 - rho) * x + rho * y  # noqa: E731
        return SuffStats(mix(self.b, other.b), mix(self.H, other.H), mix(self.yy, other.yy),
                         mix(self.n, other.n), mix(self.zsum, other.zsum), mix(self.ew2, other.ew2),
                         mix(self.logdet, other.logdet), mix(self.nact, other.nact),
                         mix(self.count, other.count))


def batch_estep(state: BpfaState, Y, Mf, idx, sample: bool, return_log_odds: bool = False):
    """Run the E-step on patches ``idx`` and update ``state.z`` / ``state.w``.

    Returns
    -------
    stats : SuffStats (unscaled)
    variances : ndarray, shape (len(idx), K)
        Posterior weight variances (zero when sampling).
    log_odds : ndarray, optional
    """
    K = state.K
    P = state.D.shape[0]
    nb = len(idx)
    Yb, Mb = Y[idx], Mf[idx]
    Zb = state.z[idx].copy()
    Wb = np.zeros((nb, K))
    Vb = np.zeros((nb, K))
    LO = np.zeros((nb, K))
    if sample:
        U = state.rng.random((nb, K))
        XI = state.rng.standard_normal((nb, K))
    else:
        U = XI = np.zeros((1, 1))
    sb = np.zeros((P, K))
    sH = np.zeros((P, K, K))
    pi = np.clip(state.pi, 1e-300, 1.0 - 1e-16)
    order = np.lexsort((state.D[0], -pi))
    D = np.ascontiguousarray(state.D)
    logdet, nact, ew2 = estep(Yb, Mb, D, float(state.gamma_n), float(state.gamma_w),
                              np.log(pi) - np.log1p(-pi), Zb, order, bool(sample),
                              U, XI, sb, sH, Wb, Vb, LO)
    if sample:
        # inactive weights are drawn from their prior
        prior = state.rng.standard_normal((nb, K)) / math.sqrt(state.gamma_w)
        Wb = np.where(Zb, Wb, prior)
    state.z[idx] = Zb
    state.w[idx] = Wb
    stats = SuffStats(sb, sH, (Mb * Yb * Yb).sum(0), float(Mb.sum()), Zb.sum(0).astype(np.float64),
                      ew2, logdet, nact, float(nb))
    if return_log_odds:
        return stats, Vb, LO
    return stats, Vb


def m_step(state: BpfaState, stats: SuffStats, hyper: BpfaHyperparams, sample: bool,
           sample_all: bool = False) -> float:
    """Update D, gamma_n, gamma_w and pi from (already scaled) statistics.

    ``sample`` draws D from its posterior; ``sample_all`` also draws pi and
    the precisions. Otherwise posterior means are used. Returns the residual
    sum of squares used for gamma_n.
    """
    mean, prec = dictionary_posterior(stats.b, stats.H, state.gamma_n)
    state.D = _sample_rows(mean, prec, state.rng) if sample else mean
    D = state.D
    sse = float(np.sum(stats.yy - 2.0 * np.sum(D * stats.b, axis=1)
                       + np.einsum("pk,pkj,pj->p", D, stats.H, D)))
    sse = max(sse, 0.0)
    sn, rn = noise_precision_posterior(sse, stats.n, hyper)
    sw, rw = weight_precision_posterior(stats.nact, stats.ew2, hyper)
    alpha, beta = pi_posterior(stats.zsum, stats.count, hyper)
    if sample_all:
        state.gamma_n = float(state.rng.gamma(sn, 1.0 / rn))
        state.gamma_w = float(state.rng.gamma(sw, 1.0 / rw))
        pi = state.rng.beta(alpha, beta)
    else:
        state.gamma_n = sn / rn
        state.gamma_w = sw / rw
        pi = alpha / (alpha + beta)
    state.pi = np.clip(pi, 1e-300, 1.0 - 1e-16)
    return sse


def objective(state: BpfaState, stats: SuffStats, hyper: BpfaHyperparams, sse: float,
              with_entropy: bool = True) -> float:
    """Log-joint surrogate evaluated on (scaled) statistics.

    With ``with_entropy`` the Gaussian weight posteriors enter through their
    entropy, which turns the value into a lower bound on the log evidence
    that full-batch EM never decreases. Prior terms use the log-scale form
    whose maximizers are the posterior means used in the M-step.
    """
    gn, gw = state.gamma_n, state.gamma_w
    pi = state.pi
    P, K = state.D.shape
    a0, b0 = hyper.beta_prior
    val = -0.5 * gn * sse + 0.5 * stats.n * (math.log(gn) - LOG_2PI)
    val += 0.5 * stats.nact * math.log(gw) - 0.5 * gw * stats.ew2
    if with_entropy:
        val += 0.5 * stats.logdet + 0.5 * stats.nact
    else:
        val -= 0.5 * stats.nact * LOG_2PI
    lp, l1p = np.log(pi), np.log1p(-pi)
    val += float(np.sum(stats.zsum * lp + (stats.count - stats.zsum) * l1p))
    val += float(np.sum(a0 * lp + b0 * l1p))
    val += -0.5 * P * float(np.sum(state.D ** 2)) + 0.5 * P * K * (math.log(P) - LOG_2PI)
    val += hyper.c * math.log(gn) - hyper.d * gn + hyper.e * math.log(gw) - hyper.f * gw
    return float(val)


def run_epoch(state: BpfaState, Y, Mf, hyper: BpfaHyperparams, schedule: BatchSchedule,
              sample: bool, running: list | None = None, shuffle_rng=None,
              epoch: int = 0, sample_all: bool = False) -> float:
    """One pass over all patches in shuffled mini-batches.

    ``running`` holds ``[stats, t]`` for stochastic-approximation averaging
    and is updated in place. Returns the mean per-batch objective.
    """
    n = len(Y)
    nbat = schedule.n_batches(n)
    rng = shuffle_rng if shuffle_rng is not None else state.rng
    perm = rng.permutation(n)
    values = []
    for bi, part in enumerate(np.array_split(perm, nbat)):
        idx = np.sort(part)
        stats, _ = batch_estep(state, Y, Mf, idx, sample)
        scaled = stats.scaled(n / len(idx))
        if schedule.rm_kappa is not None and running is not None:
            prev, t = running if running else (None, 0)
            t += 1
            if prev is None:
                avg = scaled
            else:
                avg = prev.blend(scaled, (schedule.rm_t0 + t) ** (-schedule.rm_kappa))
            running[:] = [avg, t]
            scaled = avg
        sse = m_step(state, scaled, hyper, sample, sample_all)
        val = objective(state, scaled, hyper, sse, with_entropy=not sample)
        if not math.isfinite(val):
            raise NumericalError(f"non-finite objective at epoch {epoch}, batch {bi}")
        values.append(val)
    return float(np.mean(values))


def run_inference(patches, hyper: BpfaHyperparams, schedule: BatchSchedule, mode=Mode.EM,
                  seed: int = 0, observed=None, state: BpfaState | None = None,
                  callback=None) -> tuple[BpfaState, list[TraceRow]]:
    """Fit the model to masked patches.

    Parameters
    ----------
    patches : PatchSet or ndarray, shape (N_p, B*B)
    hyper : BpfaHyperparams
    schedule : BatchSchedule
    mode : Mode
        EM takes posterior modes after the burn-in; Gibbs samples throughout.
    seed : int
    observed : ndarray of bool, optional
        Observation flags when ``patches`` is a plain array.
    state : BpfaState, optional
        Resume from this state instead of a fresh one.
    callback : callable, optional
        Called as ``callback(row, state)`` after every epoch.

    Returns
    -------
    state : BpfaState
    trace : list of TraceRow
    """
    mode = Mode(mode)
    Y, Mf = _patch_arrays(patches, observed)
    schedule.n_batches(len(Y))
    if state is None:
        state = init_state(Y, hyper, seed)
    if state.D.shape[1] != hyper.K or len(state.z) != len(Y):
        raise ValueError("state does not match the patches or K")
    shuffle_rng = None if schedule.shuffle_seed is None else np.random.default_rng(schedule.shuffle_seed)
    running: list = []
    trace: list[TraceRow] = []
    history: list[float] = []
    for ep in range(schedule.epochs):
        t0 = time.perf_counter()
        sample = mode is Mode.GIBBS or ep < schedule.burn_in
        if mode is Mode.EM and ep == schedule.burn_in and ep > 0:
            state.pi = np.full(hyper.K, hyper.prior_pi)
            running.clear()
        val = run_epoch(state, Y, Mf, hyper, schedule, sample, running, shuffle_rng, ep,
                        sample_all=mode is Mode.GIBBS)
        row = TraceRow(ep, val, int(state.z.any(axis=0).sum()), float(state.pi.mean()),
                       1000.0 * (time.perf_counter() - t0))
        trace.append(row)
        if callback is not None:
            callback(row, state)
        if not sample:
            history.append(val)
        if (schedule.early_stop and len(history) > schedule.patience
                and abs(history[-1] - history[-1 - schedule.patience])
                <= schedule.tol * abs(history[-1])):
            break
    if mode is Mode.EM:
        # deterministic refresh so every patch is coded under the final parameters
        batch_estep(state, Y, Mf, np.arange(len(Y)), sample=False)
    return state, trace


def reconstruct_patches(state: BpfaState, grid: PatchGrid, offsets=None, observed=None,
                        clip: bool = True) -> Image:
    """Average the patch estimates D (z_i * w_i) into an image, clipped to [0, 1].

    Parameters
    ----------
    state : BpfaState
    grid : PatchGrid
    offsets : ndarray, shape (N_p,), optional
        Per-patch means to add back when they were removed before fitting.
    observed : ndarray of bool, shape (N_p, B*B), optional
        When given, patches without a single observed pixel are left out of
        the average wherever some covering patch has data. Such patches only
        carry the prior mean, which would otherwise drag pixels towards zero.
    clip : bool
    """
    X = state.alpha @ state.D.T
    if offsets is not None:
        X = X + np.asarray(offsets)[:, None]
    weights = None if observed is None else np.asarray(observed).any(axis=1).astype(np.float64)
    img = reassemble(X, grid, weights)
    return Image(np.clip(img.data, 0.0, 1.0)) if clip else img


@dataclass
class InpaintResult:
    image: Image
    state: BpfaState
    trace: list
    grid: PatchGrid


def inpaint(observation, mask: Mask | None = None, patch_size: int = 8, stride: int = 1,
            hyper: BpfaHyperparams | None = None, schedule: BatchSchedule | None = None,
            mode=Mode.EM, seed: int = 0, remove_mean: bool = False, skip_empty: bool = True,
            callback=None) -> InpaintResult:
    """Fill in (and denoise) a zero-filled observation.

    Parameters
    ----------
    observation : Image or ndarray
    mask : Mask, optional
        Observed pixels, default all.
    patch_size, stride : int
    hyper : BpfaHyperparams, optional
    schedule : BatchSchedule, optional
    mode : Mode
    seed : int
    remove_mean : bool
        Subtract each patch's observed mean before fitting and add it back
        afterwards.
    skip_empty : bool
        Leave patches with no observed pixel out of the reassembly average.
    """
    hyper = hyper or BpfaHyperparams()
    schedule = schedule or BatchSchedule()
    ps = extract_patches(observation, mask, patch_size, stride)
    Y = ps.values
    offsets = None
    if remove_mean:
        cnt = ps.observed.sum(1)
        offsets = np.where(cnt > 0, Y.sum(1) / np.maximum(cnt, 1), 0.0)
        Y = np.where(ps.observed, Y - offsets[:, None], 0.0)
    state, trace = run_inference(Y, hyper, schedule, mode, seed, observed=ps.observed,
                                 callback=callback)
    img = reconstruct_patches(state, ps.grid, offsets, ps.observed if skip_empty else None)
    return InpaintResult(img, state, trace, ps.grid)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DictionarySnapshot:
    D: np.ndarray
    pi: np.ndarray
    gamma_n: float
    gamma_w: float

    @property
    def K(self) -> int:
        return self.D.shape[1]

    @property
    def patch_size(self) -> int:
        return math.isqrt(self.D.shape[0])


def write_snapshot(state, path) -> None:
    """'BPFA', u32 K, u32 B, f64 gamma_n, f64 gamma_w, K*B*B f64 atoms, K f64 pi."""
    D = np.asarray(state.D)
    K, B = D.shape[1], math.isqrt(D.shape[0])
    head = SNAPSHOT_MAGIC + struct.pack("<IIdd", K, B, float(state.gamma_n), float(state.gamma_w))
    body = np.ascontiguousarray(D.T).astype("<f8").tobytes() + np.asarray(state.pi).astype("<f8").tobytes()
    atomic_write_bytes(path, head + body)


def read_snapshot(path) -> DictionarySnapshot:
    buf = Path(path).read_bytes()
    if len(buf) < 28 or buf[:4] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a BPFA snapshot")
    K, B, gn, gw = struct.unpack("<IIdd", buf[4:28])
    need = 28 + 8 * (K * B * B + K)
    if len(buf) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(buf)}")
    atoms = np.frombuffer(buf[28:28 + 8 * K * B * B], dtype="<f8").reshape(K, B * B)
    pi = np.frombuffer(buf[28 + 8 * K * B * B:], dtype="<f8").copy()
    return DictionarySnapshot(atoms.T.copy(), pi, gn, gw)


def format_trace(trace, timing: bool = True) -> str:
    lines = ["epoch,objective,active_atoms,mean_pi,wall_ms"]
    for r in trace:
        wall = f"{r.wall_ms:.3f}" if timing else ""
        lines.append(f"{r.epoch},{r.objective!r},{r.active_atoms},{r.mean_pi!r},{wall}")
    return "\n".join(lines) + "\n"


def write_trace(trace, path, timing: bool = True) -> None:
    """Write the per-epoch trace as CSV.

    With ``timing=False`` the wall_ms column is left empty so reruns give
    identical files.
    """
    atomic_write_text(path, format_trace(trace, timing))

