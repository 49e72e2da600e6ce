"""Hidden Markov models whose frames are explained by state-conditioned index maps.

An utterance is an I x J grid (frequency bands by frames).  A hidden state
``c_j`` per frame selects, for every band ``i``, a categorical distribution
``p(s | c, i)`` over palette indices; each band of each utterance has its own
Gaussian palette.  Inference keeps the exact chain posterior ``q(c_1..c_J)``
(by forward-backward) and a factorised posterior over indices, updating the
two in turn.

Topology lives in the zero pattern of ``initial`` and ``transitions``: an
entry that starts at exactly zero stays zero under re-estimation, and floors
are applied only to the remaining support.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .core import (EmConfig, NORM_TOL, Palette, Responsibilities, SignalGrid, _relative_drop,
                   as_grid, floor_simplex, gaussian_loglik, posterior, weighted_gaussians)
from .errors import ConfigurationError, InvalidInputError

logger = logging.getLogger(__name__)

DEFAULT_HMM_S = 7
TOPOLOGIES = ("left-right", "ergodic")


def _check_stochastic(a, what):
    a = np.asarray(a, dtype=float)
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{what} must be finite and non-negative")
    if np.max(np.abs(a.sum(-1) - 1)) > NORM_TOL:
        raise InvalidInputError(f"{what} rows must sum to 1")
    return a


@dataclass(eq=False)
class PimHmm:
    initial: np.ndarray        # (K,)
    transitions: np.ndarray    # (K, K), row-stochastic
    index_priors: np.ndarray   # (I, K, S): p(s | state, band)
    palette_size: int

    def __post_init__(self):
        self.initial = _check_stochastic(self.initial, "initial distribution")
        self.transitions = _check_stochastic(self.transitions, "transition matrix")
        self.index_priors = _check_stochastic(self.index_priors, "index priors")
        K = self.initial.shape[0]
        if self.initial.ndim != 1 or self.transitions.shape != (K, K):
            raise ConfigurationError(f"initial {self.initial.shape} and transitions "
                                     f"{self.transitions.shape} disagree on K")
        if self.index_priors.ndim != 3 or self.index_priors.shape[1:] != (K, self.palette_size):
            raise ConfigurationError(f"index priors must be I x {K} x {self.palette_size}, "
                                     f"got {self.index_priors.shape}")

    @property
    def num_states(self):
        return self.initial.shape[0]

    @property
    def bands(self):
        return self.index_priors.shape[0]

    def log_index_priors(self):
        return np.log(self.index_priors)


@dataclass(eq=False)
class BandPalettes:
    """One palette per frequency band: ``means`` and ``variances`` are (I, S, D)."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        if self.means.ndim == 2:
            self.means = self.means[..., None]
            self.variances = self.variances.reshape(self.means.shape)
        if self.means.ndim != 3 or self.means.shape != self.variances.shape:
            raise ConfigurationError("band palettes need matching (I, S, D) means and variances")
        if np.any(self.variances <= 0) or not np.all(np.isfinite(self.means)):
            raise InvalidInputError("band palette variances must be positive and means finite")

    @property
    def bands(self):
        return self.means.shape[0]

    @property
    def size(self):
        return self.means.shape[1]

    def band(self, i) -> Palette:
        return Palette(self.means[i], self.variances[i])

    @classmethod
    def from_palettes(cls, palettes):
        return cls(np.stack([p.means for p in palettes]), np.stack([p.variances for p in palettes]))

    def loglik(self, grid):
        """log p(x_ij | s) under band i's palette -> (I, J, S)."""
        x = grid.values  # (I, J, D)
        return np.stack([gaussian_loglik(x[i], self.means[i], self.variances[i])
                         for i in range(self.bands)])


@dataclass(eq=False)
class HmmPosterior:
    gamma: np.ndarray          # (J, K)
    xi: np.ndarray             # (J-1, K, K)
    q_indices: Responsibilities  # (I, J, S)
    log_norm: float
    neg_entropy: float         # E_q[log q(c_1..c_J)]
    free_energy: float
    sweeps: int = 0

    def state_path(self):
        return np.argmax(self.gamma, axis=1)


@dataclass(eq=False)
class HmmFit:
    model: PimHmm
    palettes: list
    posteriors: list
    trace: list


def forward_backward(log_emission, initial, transitions):
    """Scaled forward-backward.

    ``log_emission`` is (J, K).  Returns ``(gamma, xi, log_norm)`` with
    ``gamma`` (J, K) state posteriors, ``xi`` (J-1, K, K) pairwise posteriors
    and ``log_norm`` the log of the summed path weight.
    """
    e = np.asarray(log_emission, dtype=float)
    pi = np.asarray(initial, dtype=float)
    A = np.asarray(transitions, dtype=float)
    J, K = e.shape
    shift = e.max(1, keepdims=True)
    b = np.exp(e - shift)
    alpha = np.empty((J, K))
    scale = np.empty(J)
    a = pi * b[0]
    scale[0] = a.sum()
    alpha[0] = a / scale[0]
    for j in range(1, J):
        a = (alpha[j - 1] @ A) * b[j]
        scale[j] = a.sum()
        if scale[j] <= 0:
            raise InvalidInputError(f"no state sequence can explain frame {j}")
        alpha[j] = a / scale[j]
    beta = np.empty((J, K))
    beta[-1] = 1.0
    for j in range(J - 2, -1, -1):
        beta[j] = (A @ (b[j + 1] * beta[j + 1])) / scale[j + 1]
    gamma = alpha * beta
    gamma /= gamma.sum(1, keepdims=True)
    xi = alpha[:-1, :, None] * A[None] * (b[1:] * beta[1:])[:, None, :]
    if J > 1:
        xi /= xi.sum((1, 2), keepdims=True)
    log_norm = float(np.log(scale).sum() + shift.sum())
    return gamma, xi, log_norm


def _check_utterance(utt, model, palettes):
    utt = as_grid(utt)
    if utt.height != model.bands:
        raise ConfigurationError(f"utterance has {utt.height} bands, model has {model.bands}")
    if palettes.bands != utt.height or palettes.size != model.palette_size:
        raise ConfigurationError(f"band palettes are {palettes.bands} x S={palettes.size}; "
                                 f"expected {utt.height} x S={model.palette_size}")
    if palettes.means.shape[2] != utt.dim:
        raise ConfigurationError(f"palette D={palettes.means.shape[2]} vs utterance D={utt.dim}")
    return utt


def _chain_terms(model, gamma, xi):
    return float(xlogy(gamma[0], model.initial).sum() + xlogy(xi, model.transitions).sum())


def _index_terms(q, L):
    # sum of q (log q - log p(x|s)), the state-independent part of the bound
    return float((xlogy(q, q) - q * L).sum())


def _emissions(q, logP):
    return np.einsum("ijs,ics->jc", q, logP)


def _utterance_free_energy(model, logP, L, post_gamma, post_xi, neg_entropy, q):
    e = _emissions(q, logP)
    return (neg_entropy - _chain_terms(model, post_gamma, post_xi)
            - float((post_gamma * e).sum()) + _index_terms(q, L))


def hmm_e_step(utt, model: PimHmm, palettes: BandPalettes, config: EmConfig | None = None,
               init: HmmPosterior | None = None) -> HmmPosterior:
    """Alternate index and state-chain updates for one utterance.

    Each sweep first sets ``q(s_ij)`` from the expected state-conditioned
    prior and the palette likelihood, then runs forward-backward on the
    expected log index probabilities.  Without ``init`` the first sweep uses
    uniform state posteriors.
    """
    config = config or EmConfig()
    utt = _check_utterance(utt, model, palettes)
    I, J = utt.height, utt.width
    K = model.num_states
    logP = model.log_index_priors()
    L = palettes.loglik(utt)
    gamma = np.full((J, K), 1.0 / K) if init is None else init.gamma
    prev = None
    sweeps = 0
    while True:
        q = posterior(np.einsum("jc,ics->ijs", gamma, logP), L)
        e = _emissions(q, logP)
        gamma, xi, log_norm = forward_backward(e, model.initial, model.transitions)
        neg_entropy = _chain_terms(model, gamma, xi) + float((gamma * e).sum()) - log_norm
        F = -log_norm + _index_terms(q, L)
        sweeps += 1
        if prev is not None and abs(prev - F) < config.inner_tol * max(1.0, abs(F)):
            break
        if sweeps >= config.inner_max_iters:
            break
        prev = F
    return HmmPosterior(gamma=gamma, xi=xi, q_indices=Responsibilities(q), log_norm=log_norm,
                        neg_entropy=neg_entropy, free_energy=F, sweeps=sweeps)


def hmm_free_energy(utt, model: PimHmm, palettes: BandPalettes, post: HmmPosterior) -> float:
    """Bound for one utterance under an arbitrary (model, palettes, posterior) triple."""
    utt = _check_utterance(utt, model, palettes)
    return _utterance_free_energy(model, model.log_index_priors(), palettes.loglik(utt),
                                  post.gamma, post.xi, post.neg_entropy, post.q_indices.probs)


def initial_band_palettes(utt, S, rng, config: EmConfig) -> BandPalettes:
    """Per-band k-means with entries sorted by their first mean component.

    Sorting gives every band of every utterance the same index convention
    (index 0 is the lowest level), which is preserved by any increasing
    re-mapping of the measurements.
    """
    from ._init import kmeans_palette

    utt = as_grid(utt)
    pals = [kmeans_palette(utt.values[i], S, rng, config, sort_by_mean=True)[0]
            for i in range(utt.height)]
    return BandPalettes.from_palettes(pals)


def update_band_palettes(utt, q, config: EmConfig) -> BandPalettes:
    utt = as_grid(utt)
    means, var = zip(*(weighted_gaussians(utt.values[i], q[i], config.variance_floor,
                                          config.mass_epsilon) for i in range(utt.height)))
    return BandPalettes(np.stack(means), np.stack(var))


def _floor_on_support(p, floor):
    """Row-wise floor applied only where ``p`` is non-zero."""
    p = np.asarray(p, dtype=float)
    out = np.zeros_like(p)
    flat_in = p.reshape(-1, p.shape[-1])
    flat_out = out.reshape(-1, p.shape[-1])
    for r in range(len(flat_in)):
        sup = flat_in[r] > 0
        flat_out[r, sup] = floor_simplex(flat_in[r, sup], floor) if sup.sum() > 1 else 1.0
    return out


def _m_step_model(model, posts, config):
    K, S = model.num_states, model.palette_size
    pi = sum(p.gamma[0] for p in posts)
    trans = sum(p.xi.sum(0) for p in posts if p.xi.shape[0] > 0)
    counts = sum(np.einsum("jc,ijs->ics", p.gamma, p.q_indices.probs) for p in posts)

    pi = _floor_on_support(np.where(model.initial > 0, pi, 0.0) / pi.sum(), config.transition_floor)
    A = model.transitions.copy()
    if np.ndim(trans) == 2:
        mass = trans.sum(1)
        for k in range(K):
            if mass[k] > 0:
                A[k] = np.where(model.transitions[k] > 0, trans[k], 0.0) / mass[k]
        A = _floor_on_support(A, config.transition_floor)
    P = model.index_priors.copy()
    mass = counts.sum(-1)
    live = mass > 1e-300
    P[live] = floor_simplex(counts[live] / mass[live][:, None], config.prior_floor)
    return PimHmm(initial=pi, transitions=A, index_priors=P, palette_size=S)


def _flat_start(utts, K, S, palettes, topology, config):
    """Model from a uniform left-to-right segmentation of every utterance."""
    I = utts[0].height
    gammas, posts = [], []
    for utt, pal in zip(utts, palettes):
        J = utt.width
        seg = np.minimum((np.arange(J) * K) // J, K - 1)
        gamma = np.eye(K)[seg]
        xi = gamma[:-1, :, None] * gamma[1:, None, :]
        q = posterior(np.zeros((I, J, S)), pal.loglik(utt))
        posts.append(HmmPosterior(gamma=gamma, xi=xi, q_indices=Responsibilities(q), log_norm=0.0,
                                  neg_entropy=0.0, free_energy=np.inf))
        gammas.append(gamma)
    if topology == "left-right":
        A = np.eye(K) + np.eye(K, k=1)
        initial = np.eye(K)[0]
    else:
        A = np.ones((K, K))
        initial = np.full(K, 1.0 / K)
    template = PimHmm(initial=initial, transitions=A / A.sum(1, keepdims=True),
                      index_priors=np.full((I, K, S), 1.0 / S), palette_size=S)
    model = _m_step_model(template, posts, config)
    if topology == "ergodic":
        # keep every transition reachable after the hard segmentation counts
        A = 0.5 * model.transitions + 0.5 / K
        model = PimHmm(initial=np.full(K, 1.0 / K), transitions=A,
                       index_priors=model.index_priors, palette_size=S)
    return model, posts


def _validate_utterances(utterances):
    utts = [as_grid(u) for u in utterances]
    if not utts:
        raise InvalidInputError("need at least one utterance")
    I, D = utts[0].height, utts[0].dim
    for n, u in enumerate(utts):
        if u.height != I or u.dim != D:
            raise InvalidInputError(f"utterance {n} is {u.height} bands x D={u.dim}; "
                                    f"expected {I} bands x D={D}")
    return utts


def fit_pim_hmm(utterances, K, S=DEFAULT_HMM_S, config: EmConfig | None = None, *,
                topology="left-right", init_palettes=None) -> HmmFit:
    """Variational EM for one PIM-HMM over a set of utterances.

    Starts from sorted per-band k-means palettes and a uniform segmentation,
    then alternates the structured E step for every utterance with
    re-estimation of the initial distribution, transitions, state-conditioned
    index priors and each utterance's band palettes.  ``trace`` holds the
    total free energy after every E phase.
    """
    config = config or EmConfig()
    if K < 1 or S < 1:
        raise ConfigurationError("K and S must be >= 1")
    if topology not in TOPOLOGIES:
        raise ConfigurationError(f"topology must be one of {TOPOLOGIES}, got {topology!r}")
    utts = _validate_utterances(utterances)
    rng = np.random.default_rng(config.seed)
    if init_palettes is None:
        palettes = [initial_band_palettes(u, S, rng, config) for u in utts]
    else:
        palettes = list(init_palettes)
    model, posts = _flat_start(utts, K, S, palettes, topology, config)

    trace = []
    for it in range(config.max_iters + 1):
        posts = [hmm_e_step(u, model, pal, config, init=p)
                 for u, pal, p in zip(utts, palettes, posts)]
        F = float(sum(p.free_energy for p in posts))
        trace.append(F)
        logger.debug("fit_pim_hmm iter %d  F=%.10g", it, F)
        if it > 0 and _relative_drop(trace[-2], F) < config.tol:
            break
        if it == config.max_iters:
            break
        palettes = [update_band_palettes(u, p.q_indices.probs, config) for u, p in zip(utts, posts)]
        model = _m_step_model(model, posts, config)
    return HmmFit(model=model, palettes=palettes, posteriors=posts, trace=trace)


def infer_utterance(utt, model: PimHmm, config: EmConfig | None = None, init_palettes=None):
    """Fit band palettes and the posterior for one utterance with the model frozen.

    Returns ``(palettes, posterior, trace)``.
    """
    config = config or EmConfig()
    utt = as_grid(utt)
    if init_palettes is None:
        palettes = initial_band_palettes(utt, model.palette_size,
                                         np.random.default_rng(config.seed), config)
    else:
        palettes = init_palettes
    post = None
    trace = []
    for it in range(config.max_iters + 1):
        post = hmm_e_step(utt, model, palettes, config, init=post)
        trace.append(post.free_energy)
        if it > 0 and _relative_drop(trace[-2], trace[-1]) < config.tol:
            break
        if it == config.max_iters:
            break
        palettes = update_band_palettes(utt, post.q_indices.probs, config)
    return palettes, post, trace


def classify_utterance(utt, models, config: EmConfig | None = None):
    """Pick the model with the lowest converged free energy.

    Returns ``(best index, bounds)`` where ``bounds[m]`` is minus the free
    energy under model ``m``; ties go to the lowest index.
    """
    if not models:
        raise ConfigurationError("need at least one candidate model")
    bounds = np.array([-infer_utterance(utt, m, config)[2][-1] for m in models])
    return int(np.argmax(bounds)), bounds
