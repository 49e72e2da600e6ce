"""Transformed mixtures of probabilistic index maps.

Generative model per signal: a class ``c`` with prior ``p(c)``, an index map
``S`` drawn from the class PIM ``p(S|c)`` in the class's own frame, a cyclic
shift ``T`` with prior ``p(T)``, and measurements ``x_ij`` drawn from the
signal's palette entry ``s_{T(ij)}``.

The posterior is approximated by ``q(c) q(S|c) q(T|c)`` with ``q(S|c)``
factorised over locations.  ``q(S|c)`` is kept in the class frame, which
makes the class-PIM update a plain weighted average.  Every coordinate
update below is the exact minimiser of the free energy given the other
factors, so inner sweeps and outer iterations never raise it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, xlogy

from ._init import (align_labelings, gather_shifted, kmeans_palette, relabel_palette,
                    shift_indices)
from .core import (EmConfig, IndexPrior, NORM_TOL, Palette, Responsibilities,
                   _relative_drop, _validate_collection, floor_simplex, gaussian_loglik,
                   posterior, weighted_gaussians)
from .errors import ConfigurationError, InvalidInputError
from .transform import Transform, TransformSet, apply_transform

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class TmpimModel:
    class_prior: np.ndarray   # (C,)
    class_pims: np.ndarray    # (C, I, J, S)
    tset: TransformSet
    palette_size: int

    def __post_init__(self):
        self.class_prior = np.asarray(self.class_prior, dtype=float)
        self.class_pims = np.asarray(self.class_pims, dtype=float)
        C = self.class_prior.shape[0]
        if self.class_pims.ndim != 4 or self.class_pims.shape[0] != C:
            raise ConfigurationError(
                f"class_pims must be C x I x J x S with C={C}, got {self.class_pims.shape}")
        if self.class_pims.shape[-1] != self.palette_size:
            raise ConfigurationError("class PIM size does not match palette_size")
        if abs(self.class_prior.sum() - 1) > NORM_TOL or np.any(self.class_prior < 0):
            raise ConfigurationError("class_prior must be a probability vector")
        for c in range(C):
            IndexPrior(self.class_pims[c])  # validates

    @property
    def num_classes(self):
        return self.class_prior.shape[0]

    @property
    def grid_shape(self):
        return self.class_pims.shape[1:3]

    def class_pim(self, c) -> IndexPrior:
        return IndexPrior(self.class_pims[c])


@dataclass(eq=False)
class TmpimPosterior:
    q_class: np.ndarray       # (C,)
    q_transform: np.ndarray   # (C, M)
    q_indices: np.ndarray     # (C, I, J, S), class frame
    free_energy: float = float("nan")
    sweeps: list = field(default_factory=list)

    def responsibilities(self, c) -> Responsibilities:
        return Responsibilities(self.q_indices[c])

    def best_class(self):
        return int(np.argmax(self.q_class))

    def best_transform(self, tset, c=None):
        c = self.best_class() if c is None else c
        return tset[int(np.argmax(self.q_transform[c]))]


@dataclass(eq=False)
class TmpimFit:
    model: TmpimModel
    palettes: list
    posteriors: list
    trace: list


def _softmax(a, axis=-1):
    return np.exp(a - logsumexp(a, axis=axis, keepdims=True))


class _Signal:
    """Quantities that stay fixed while one signal's posterior is optimised."""

    def __init__(self, x, palette, model: TmpimModel):
        I, J = x.shape[:2]
        self.L = gaussian_loglik(x, palette.means, palette.variances)
        off = model.tset.offsets
        rows, cols = shift_indices(I, J, -off)
        # back[m, k, l] = L at T_m^{-1}(k, l): the likelihood image seen from the class frame
        self.back = gather_shifted(self.L, rows, cols)
        self.fwd_idx = shift_indices(I, J, off)
        with np.errstate(divide="ignore"):
            self.log_pc = np.log(model.class_prior)
            self.log_pT = np.log(model.tset.prior)
            self.log_pS = np.log(model.class_pims)

    def scores(self, qS):
        return np.einsum("cijs,mijs->cm", qS, self.back, optimize=True)

    def class_energies(self, qT, qS, scores=None):
        if scores is None:
            scores = self.scores(qS)
        with np.errstate(invalid="ignore"):
            t_term = xlogy(qT, qT) - np.where(qT > 0, qT * self.log_pT, 0.0)
            s_term = xlogy(qS, qS) - np.where(qS > 0, qS * self.log_pS, 0.0)
        return t_term.sum(-1) + s_term.sum((1, 2, 3)) - (qT * scores).sum(-1)

    def energy(self, qc, qT, qS):
        Fc = self.class_energies(qT, qS)
        with np.errstate(invalid="ignore"):
            c_term = xlogy(qc, qc) - np.where(qc > 0, qc * self.log_pc, 0.0)
        return float(c_term.sum() + (qc * Fc).sum())

    def update_indices(self, qT):
        expected = np.einsum("cm,mijs->cijs", qT, self.back, optimize=True)
        return posterior(self.log_pS, expected)

    def update_transforms(self, qS):
        return _softmax(self.log_pT + self.scores(qS))

    def update_classes(self, qT, qS):
        return _softmax(self.log_pc - self.class_energies(qT, qS))

    def pixel_weights(self, qc, qT, qS):
        """Expected entry indicators in the image frame, averaged over c and T."""
        rows, cols = self.fwd_idx
        w = np.zeros(self.L.shape)
        for c in range(len(qc)):
            if qc[c] == 0:
                continue
            stack = gather_shifted(qS[c], rows, cols)
            w += qc[c] * np.einsum("m,mijs->ijs", qT[c], stack)
        return w / w.sum(-1, keepdims=True)


def _check_signal(grid, palette, model):
    if grid.shape[:2] != model.grid_shape:
        raise ConfigurationError(
            f"grid I x J = {grid.shape[:2]} does not match model I x J = {model.grid_shape}")
    if palette.size != model.palette_size:
        raise ConfigurationError(f"palette S={palette.size} does not match model S={model.palette_size}")
    if palette.dim != grid.dim:
        raise ConfigurationError(f"palette D={palette.dim} does not match grid D={grid.dim}")


def _e_step(sig: _Signal, config, init=None):
    if init is None:
        qS = np.exp(sig.log_pS)
        qT = sig.update_transforms(qS)
        qc = sig.update_classes(qT, qS)
    else:
        qc, qT, qS = init.q_class, init.q_transform, init.q_indices
    F = sig.energy(qc, qT, qS)
    sweeps = [F]
    for _ in range(config.inner_max_iters):
        qS = sig.update_indices(qT)
        qT = sig.update_transforms(qS)
        qc = sig.update_classes(qT, qS)
        F_new = sig.energy(qc, qT, qS)
        sweeps.append(F_new)
        done = abs(F - F_new) < config.inner_tol * max(1.0, abs(F))
        F = F_new
        if done:
            break
    return TmpimPosterior(qc, qT, qS, F, sweeps)


def tmpim_e_step(grid, palette: Palette, model: TmpimModel, config: EmConfig | None = None,
                 init: TmpimPosterior | None = None) -> TmpimPosterior:
    """Coordinate ascent on q(c) q(S|c) q(T|c) for one signal.

    A sweep updates q(S|c) for every class, then q(T|c), then q(c).  Sweeps
    stop once the signal's free energy changes by less than
    ``config.inner_tol`` (relative, for |F| > 1) or after
    ``config.inner_max_iters`` sweeps.  Without ``init`` the posterior starts
    from q(S|c) = p(S|c).
    """
    from .core import as_grid

    config = config or EmConfig()
    grid = as_grid(grid)
    _check_signal(grid, palette, model)
    return _e_step(_Signal(grid.values, palette, model), config, init)


def tmpim_free_energy(grid, palette, model, post: TmpimPosterior) -> float:
    from .core import as_grid

    grid = as_grid(grid)
    _check_signal(grid, palette, model)
    return _Signal(grid.values, palette, model).energy(post.q_class, post.q_transform, post.q_indices)


def _signed(v, n):
    v = v % n
    return np.where(v > n // 2, v - n, v)


def _recenter(al, tset, I, J):
    """Shift each class frame so member shifts fall inside ``tset`` where possible."""
    allowed = np.zeros((I, J), dtype=bool)
    for t in tset:
        u = t.normalized(I, J)
        allowed[u.dy, u.dx] = True
    oy, ox = np.meshgrid(np.arange(I), np.arange(J), indexing="ij")
    dist = np.abs(_signed(oy, I)) + np.abs(_signed(ox, J))
    order = np.lexsort((ox.ravel(), oy.ravel(), dist.ravel()))
    protos = al.prototypes.copy()
    shifts = al.shifts.copy()
    for c in range(len(protos)):
        members = np.flatnonzero(al.classes == c)
        if len(members) == 0:
            continue
        s = shifts[members]
        # hits[o] = members whose shift relative to offset o is representable
        hits = np.zeros((I, J), dtype=int)
        for sy, sx in s:
            hits += allowed[(sy - oy) % I, (sx - ox) % J]
        k = order[np.argmax(hits.ravel()[order])]
        best = (int(oy.ravel()[k]), int(ox.ravel()[k]))
        protos[c] = apply_transform(protos[c], Transform(*best))
        shifts[members] = (shifts[members] - np.array(best)) % (I, J)
    al.prototypes = protos
    al.shifts = shifts
    return al


def initialize_tmpim(grids, C, S, tset, config, rng):
    """k-means palettes per signal, then hard alignment of their label maps.

    Signals are grouped into C prototypes over entry permutations and cyclic
    shifts (up to twice the largest shift in ``tset``); each prototype frame
    is then moved so that its members' shifts land inside ``tset``.  Returns
    the relabelled palettes and an initial model whose class PIMs are the
    smoothed prototypes.
    """
    I, J = grids[0].height, grids[0].width
    fits = [kmeans_palette(g.values.reshape(-1, g.dim), S, rng, config) for g in grids]
    labels = np.array([lab.reshape(I, J) for _, lab in fits])
    off = tset.offsets
    ry = int(np.max(np.abs(_signed(off[:, 0], I))))
    rx = int(np.max(np.abs(_signed(off[:, 1], J))))
    cand = TransformSet.shifts(I, J, min(2 * ry, I // 2), min(2 * rx, J // 2)).offsets
    al = align_labelings(labels, S, C, cand, rng)
    al = _recenter(al, tset, I, J)
    palettes = [relabel_palette(p, al.perms[t]) for t, (p, _) in enumerate(fits)]
    pims = np.array([floor_simplex(p, config.prior_floor) for p in al.prototypes])
    model = TmpimModel(np.full(C, 1.0 / C), pims, tset, S)
    return palettes, model


def fit_tmpim(grids, C, S, tset: TransformSet, config: EmConfig | None = None, *,
              init_palettes=None, init_model: TmpimModel | None = None) -> TmpimFit:
    """Unsupervised transformation- and palette-invariant clustering.

    Alternates (b) posterior inference per signal, (a) palette re-estimation
    from the transform-aligned responsibilities and (c) re-estimation of the
    class PIMs and class prior, recording the total free energy after every
    inference phase.
    """
    config = config or EmConfig()
    grids = _validate_collection(grids)
    if C < 1 or S < 1:
        raise ConfigurationError("C and S must be >= 1")
    if len(grids) < C:
        raise InvalidInputError(f"need at least C={C} signals, got {len(grids)}")
    I, J, D = grids[0].shape
    rng = np.random.default_rng(config.seed)

    if (init_palettes is None) != (init_model is None):
        raise ConfigurationError("pass both init_palettes and init_model, or neither")
    if init_model is None:
        palettes, model = initialize_tmpim(grids, C, S, tset, config, rng)
    else:
        palettes = [p.copy() for p in init_palettes]
        model = TmpimModel(init_model.class_prior.copy(), init_model.class_pims.copy(),
                           init_model.tset, init_model.palette_size)
        if model.num_classes != C or model.palette_size != S:
            raise ConfigurationError("init_model does not match C and S")
    if len(palettes) != len(grids):
        raise InvalidInputError("need one initial palette per signal")
    for g, p in zip(grids, palettes):
        _check_signal(g, p, model)

    trace, posts = [], [None] * len(grids)
    for it in range(config.max_iters + 1):
        sigs = [_Signal(g.values, p, model) for g, p in zip(grids, palettes)]
        posts = [_e_step(s, config, q) for s, q in zip(sigs, posts)]
        F = float(sum(q.free_energy for q in posts))
        trace.append(F)
        logger.debug("fit_tmpim iter %d  F=%.10g", it, F)
        if it > 0 and _relative_drop(trace[-2], F) < config.tol:
            break
        if it == config.max_iters:
            break
        # (a) palettes
        new_palettes = []
        for g, s, q in zip(grids, sigs, posts):
            w = s.pixel_weights(q.q_class, q.q_transform, q.q_indices)
            means, var = weighted_gaussians(g.values.reshape(-1, D), w.reshape(-1, S),
                                            config.variance_floor, config.mass_epsilon)
            new_palettes.append(Palette(means, var))
        palettes = new_palettes
        # (c) class PIMs and class prior
        qc = np.array([q.q_class for q in posts])          # (T, C)
        qS = np.array([q.q_indices for q in posts])        # (T, C, I, J, S)
        mass = qc.sum(0)
        pims = model.class_pims.copy()
        for c in range(C):
            if mass[c] > 1e-12 * len(grids):
                avg = np.einsum("t,tijs->ijs", qc[:, c], qS[:, c]) / mass[c]
                pims[c] = floor_simplex(avg, config.prior_floor)
        prior = floor_simplex(qc.mean(0), config.prior_floor) if C > 1 else np.ones(1)
        model = TmpimModel(prior, pims, model.tset, S)

    return TmpimFit(model=model, palettes=palettes, posteriors=posts, trace=trace)


def cluster_assignments(posteriors):
    """Most probable class per signal (lowest index on ties)."""
    posteriors = list(posteriors)
    if not posteriors:
        raise InvalidInputError("no posteriors given")
    return [int(np.argmax(p.q_class)) for p in posteriors]
