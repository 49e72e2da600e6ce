"""Probabilistic index maps (PIM).

A collection of signals shares one per-location categorical prior over
palette indices, while every signal carries its own palette of diagonal
Gaussians.  Learning is EM on the variational free energy; because the
posterior over indices factorizes exactly, the E step is exact and the bound
is tight after it.

Arrays follow one layout throughout the package: measurements are
``(I, J, D)``, index distributions (priors, responsibilities) are
``(I, J, S)``, palette means and variances are ``(S, D)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import logsumexp, xlogy

from .errors import ConfigurationError, InvalidInputError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

# Row-sum tolerance used when validating probability tables.
NORM_TOL = 1e-9


@dataclass
class EmConfig:
    """Knobs shared by every learner in the package."""

    tol: float = 1e-6
    max_iters: int = 200
    inner_max_iters: int = 5
    inner_tol: float = 1e-7
    seed: int = 0
    variance_floor: float = 1e-4
    prior_floor: float = 1e-6
    transition_floor: float = 1e-8
    mass_epsilon: float = 1e-6
    kmeans_iters: int = 10
    kmeans_restarts: int = 4
    init_jitter: float = 0.01

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigurationError(f"tol must be > 0, got {self.tol}")
        for name in ("max_iters", "inner_max_iters", "kmeans_iters", "kmeans_restarts"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.seed < 0:
            raise ConfigurationError("seed must be a non-negative integer")
        if not self.variance_floor > 0:
            raise ConfigurationError("variance_floor must be > 0")
        if not 0 <= self.prior_floor < 1 or not 0 <= self.transition_floor < 1:
            raise ConfigurationError("probability floors must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SignalGrid:
    """An I x J grid of D-dimensional measurements (one image or spectrogram)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or 0 in v.shape:
            raise InvalidInputError(f"signal must be I x J x D with positive sizes, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("signal contains NaN or Inf")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def dim(self):
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape


def as_grid(x) -> SignalGrid:
    return x if isinstance(x, SignalGrid) else SignalGrid(x)


@dataclass(frozen=True)
class PaletteEntry:
    mean: np.ndarray
    variance: np.ndarray


@dataclass(eq=False)
class Palette:
    """S diagonal-Gaussian measurement models; row ``s`` of each array is entry ``s``."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if self.means.shape != self.variances.shape:
            raise ConfigurationError(
                f"palette means {self.means.shape} and variances {self.variances.shape} differ")
        if self.means.shape[0] < 1:
            raise ConfigurationError("palette needs at least one entry")
        if not np.all(self.variances > 0):
            raise InvalidInputError("palette variances must be strictly positive")

    @property
    def size(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def entries(self):
        return [PaletteEntry(m, v) for m, v in zip(self.means, self.variances)]

    @classmethod
    def from_entries(cls, entries):
        return cls(np.array([e.mean for e in entries], dtype=float),
                   np.array([e.variance for e in entries], dtype=float))

    def permuted(self, order):
        """Palette whose entry ``k`` is this palette's entry ``order[k]``."""
        order = np.asarray(order)
        return Palette(self.means[order].copy(), self.variances[order].copy())

    def copy(self):
        return Palette(self.means.copy(), self.variances.copy())


def _check_simplex(probs, what):
    if probs.ndim != 3 or 0 in probs.shape:
        raise ConfigurationError(f"{what} must be an I x J x S array, got shape {probs.shape}")
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise InvalidInputError(f"{what} has negative or non-finite entries")
    if np.max(np.abs(probs.sum(-1) - 1.0)) > NORM_TOL:
        raise InvalidInputError(f"{what} rows must sum to 1")


@dataclass(eq=False)
class IndexPrior:
    """Per-location categorical distributions p_ij(s) shared by a signal collection."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        _check_simplex(self.probs, "index prior")

    @classmethod
    def uniform(cls, height, width, size):
        return cls(np.full((height, width, size), 1.0 / size))

    @property
    def height(self):
        return self.probs.shape[0]

    @property
    def width(self):
        return self.probs.shape[1]

    @property
    def size(self):
        return self.probs.shape[2]

    def log(self):
        with np.errstate(divide="ignore"):
            return np.log(self.probs)

    def argmax_map(self):
        return np.argmax(self.probs, axis=-1)

    def copy(self):
        return IndexPrior(self.probs.copy())


@dataclass(eq=False)
class Responsibilities:
    """Variational posterior q(s_ij) for one signal."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        _check_simplex(self.probs, "responsibilities")

    @property
    def size(self):
        return self.probs.shape[2]

    def argmax_map(self):
        return np.argmax(self.probs, axis=-1)


@dataclass(eq=False)
class PimModel:
    prior: IndexPrior
    palette_size: int
    palettes: list
    final_free_energy: float
    trace: list = field(default_factory=list)
    responsibilities: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Array-level kernels
# ---------------------------------------------------------------------------


def floor_simplex(p, floor):
    """Impose ``p >= floor`` on probability rows (last axis) optimally.

    Returns the maximiser of ``sum_s p_s log r_s`` over distributions ``r``
    with every ``r_s >= floor``, i.e. ``r_s = max(floor, tau * p_s)`` with
    ``tau`` chosen so the row sums to one.  Rows already above the floor come
    back unchanged.  Using the exact constrained optimum (rather than clip
    then renormalise) keeps floored M steps from ever raising the free energy.
    """
    p = np.asarray(p, dtype=float)
    if floor <= 0:
        return p / p.sum(-1, keepdims=True)
    S = p.shape[-1]
    if S * floor > 1:
        raise ConfigurationError(f"floor {floor} is infeasible for {S} categories")
    flat = p.reshape(-1, S)
    flat = flat / flat.sum(-1, keepdims=True)
    srt = np.sort(flat, axis=-1)
    # tail[:, k] = sum of the S-k largest entries, i.e. the mass left unclamped
    # when the k smallest entries sit at the floor.
    tail = np.cumsum(srt[:, ::-1], axis=-1)[:, ::-1]
    k = np.arange(S)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = (1.0 - k * floor) / tail
    ok = tau * srt >= floor
    first = np.argmax(ok, axis=-1)
    t = tau[np.arange(len(flat)), first]
    out = np.maximum(floor, t[:, None] * flat)
    out /= out.sum(-1, keepdims=True)
    return out.reshape(p.shape)


def gaussian_loglik(values, means, variances):
    """Log N(x; mean_s, diag(var_s)) for every measurement and entry -> (..., S)."""
    x = values[..., None, :]
    quad = ((x - means) ** 2 / variances).sum(-1)
    return -0.5 * (quad + np.log(variances).sum(-1) + means.shape[-1] * LOG_2PI)


def posterior(log_prior, loglik):
    """Normalised q proportional to exp(log_prior + loglik), in the log domain."""
    a = log_prior + loglik
    a = a - logsumexp(a, axis=-1, keepdims=True)
    q = np.exp(a)
    return q / q.sum(-1, keepdims=True)


def pixel_free_energy(q, log_prior, loglik):
    """Per-location sum_s q (log q - log p - log p(x|s)); 0 log 0 := 0."""
    with np.errstate(invalid="ignore"):
        cross = np.where(q > 0, q * (log_prior + loglik), 0.0)
    return xlogy(q, q).sum(-1) - cross.sum(-1)


def weighted_gaussians(x, w, variance_floor, mass_epsilon=1e-6):
    """Closed-form palette update from soft assignments.

    ``x`` is ``(N, D)``, ``w`` is ``(N, S)``.  Entries whose total weight is
    below ``mass_epsilon * N`` are re-seeded on the worst-explained
    measurement with the global variance.
    """
    N, D = x.shape
    S = w.shape[1]
    mass = w.sum(0)
    starved = mass < mass_epsilon * N
    safe = np.where(starved, 1.0, mass)
    means = (w.T @ x) / safe[:, None]
    var = np.empty((S, D))
    for s in range(S):
        d = x - means[s]
        var[s] = (w[:, s] @ (d * d)) / safe[s]
    var = np.maximum(var, variance_floor)
    if starved.any():
        global_var = np.maximum(x.var(0), variance_floor)
        fed = ~starved
        if fed.any():
            fit = gaussian_loglik(x, means[fed], var[fed]).max(-1)
        else:
            fit = np.zeros(N)
        used = set()
        for s in np.flatnonzero(starved):
            for n in np.argsort(fit, kind="stable"):
                if n not in used:
                    break
            used.add(n)
            means[s] = x[n]
            var[s] = global_var
        logger.debug("re-seeded %d starved palette entries", starved.sum())
    return means, var


def _relative_drop(prev, cur):
    return (prev - cur) / max(abs(prev), 1e-300)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def log_entry_likelihood(x, entry) -> float:
    """Log density of one measurement vector under one palette entry."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(entry.mean, dtype=float))
    var = np.atleast_1d(np.asarray(entry.variance, dtype=float))
    return float(np.sum(-0.5 * np.log(2 * np.pi * var) - 0.5 * (x - mean) ** 2 / var))


def _check_pair(grid, size, prior):
    if size != prior.size:
        raise ConfigurationError(f"palette size S={size} does not match prior size S={prior.size}")
    if (grid.height, grid.width) != (prior.height, prior.width):
        raise ConfigurationError(
            f"grid I x J = {grid.height} x {grid.width} does not match prior "
            f"I x J = {prior.height} x {prior.width}")


def _check_dim(grid, palette):
    if grid.dim != palette.dim:
        raise ConfigurationError(f"grid D={grid.dim} does not match palette D={palette.dim}")


def e_step(grid, palette: Palette, prior: IndexPrior) -> Responsibilities:
    """Exact posterior over indices for one signal given its palette and the prior."""
    grid = as_grid(grid)
    _check_pair(grid, palette.size, prior)
    _check_dim(grid, palette)
    L = gaussian_loglik(grid.values, palette.means, palette.variances)
    return Responsibilities(posterior(prior.log(), L))


def m_step_prior(resps, prior_floor=EmConfig.prior_floor) -> IndexPrior:
    """Average the responsibilities of all signals into a new shared prior."""
    resps = list(resps)
    if not resps:
        raise InvalidInputError("m_step_prior needs at least one set of responsibilities")
    shape = resps[0].probs.shape
    for r in resps[1:]:
        if r.probs.shape != shape:
            raise InvalidInputError(f"responsibility shapes differ: {r.probs.shape} vs {shape}")
    mean = np.mean([r.probs for r in resps], axis=0)
    return IndexPrior(floor_simplex(mean, prior_floor))


def m_step_palette(grid, resps: Responsibilities, S=None, config: EmConfig | None = None) -> Palette:
    """Weighted mean and diagonal scatter of the measurements per entry."""
    config = config or EmConfig()
    grid = as_grid(grid)
    if S is not None and S != resps.size:
        raise ConfigurationError(f"S={S} does not match responsibilities with S={resps.size}")
    if resps.probs.shape[:2] != (grid.height, grid.width):
        raise ConfigurationError("responsibilities and grid have different I x J")
    x = grid.values.reshape(-1, grid.dim)
    w = resps.probs.reshape(-1, resps.size)
    means, var = weighted_gaussians(x, w, config.variance_floor, config.mass_epsilon)
    return Palette(means, var)


def free_energy(grids, palettes, prior: IndexPrior, resps) -> float:
    """Variational free energy of a signal collection (entropy - prior - likelihood terms)."""
    grids, palettes, resps = list(grids), list(palettes), list(resps)
    if not len(grids) == len(palettes) == len(resps):
        raise ConfigurationError("grids, palettes and responsibilities must have equal length")
    logp = prior.log()
    total = 0.0
    for g, pal, r in zip(grids, palettes, resps):
        g = as_grid(g)
        _check_pair(g, pal.size, prior)
        L = gaussian_loglik(g.values, pal.means, pal.variances)
        total += pixel_free_energy(r.probs, logp, L).sum()
    return float(total)


def exact_negative_log_likelihood(grid, palette: Palette, prior: IndexPrior) -> float:
    """-sum_ij log sum_s p_ij(s) p(x_ij | s) for one signal."""
    grid = as_grid(grid)
    _check_pair(grid, palette.size, prior)
    L = gaussian_loglik(grid.values, palette.means, palette.variances)
    return float(-logsumexp(prior.log() + L, axis=-1).sum())


def harden_prior(prior: IndexPrior, prior_floor=EmConfig.prior_floor) -> IndexPrior:
    """One-hot limit of a PIM: every location commits to its most probable index."""
    S = prior.size
    hard = np.eye(S)[prior.argmax_map()]
    return IndexPrior(floor_simplex(hard, prior_floor))


def _validate_collection(grids):
    grids = [as_grid(g) for g in grids]
    if not grids:
        raise InvalidInputError("need at least one signal")
    I, J, D = grids[0].shape
    for t, g in enumerate(grids):
        if g.shape != (I, J, D):
            raise InvalidInputError(
                f"signal {t} has shape {g.shape}, expected {(I, J, D)} like signal 0")
    return grids


def fit_pim(grids, S, config: EmConfig | None = None, *, init_palettes=None, init_prior=None) -> PimModel:
    """Learn a shared index prior and per-signal palettes by EM.

    Each iteration runs the exact E step for every signal, records the free
    energy (equal to the negative log likelihood at that point), then updates
    every palette and the prior.  Iteration stops when the relative drop in
    free energy falls below ``config.tol``.

    Without ``init_palettes`` each palette starts from k-means on its own
    signal, with entry labels permuted to agree across signals; the prior
    starts uniform with a small seeded jitter.
    """
    from ._init import initial_palettes

    config = config or EmConfig()
    grids = _validate_collection(grids)
    if S < 1:
        raise ConfigurationError("palette size S must be >= 1")
    I, J, D = grids[0].shape
    rng = np.random.default_rng(config.seed)

    if init_palettes is None:
        palettes = initial_palettes(grids, S, rng, config)
    else:
        palettes = [p.copy() for p in init_palettes]
        if len(palettes) != len(grids):
            raise InvalidInputError("init_palettes must have one palette per signal")
    if init_prior is None:
        jitter = 1.0 + config.init_jitter * rng.random((I, J, S))
        prior = IndexPrior(jitter / jitter.sum(-1, keepdims=True))
    else:
        prior = init_prior.copy()
    for pal in palettes:
        if pal.size != S or pal.dim != D:
            raise ConfigurationError(f"initial palette has S={pal.size}, D={pal.dim}; expected S={S}, D={D}")
    _check_pair(grids[0], S, prior)

    trace = []
    for it in range(config.max_iters + 1):
        resps = [e_step(g, pal, prior) for g, pal in zip(grids, palettes)]
        F = free_energy(grids, palettes, prior, resps)
        trace.append(F)
        logger.debug("fit_pim iter %d  F=%.10g", it, F)
        if it > 0 and _relative_drop(trace[-2], F) < config.tol:
            break
        if it == config.max_iters:
            break
        palettes = [m_step_palette(g, r, config=config) for g, r in zip(grids, resps)]
        prior = m_step_prior(resps, config.prior_floor)

    return PimModel(prior=prior, palette_size=S, palettes=palettes,
                    final_free_energy=trace[-1], trace=trace, responsibilities=resps)
