"""Palette-invariant background subtraction from a single frame.

A PIM trained on background frames keeps only the index structure of the
scene.  For a new frame the palette is re-inferred with that prior frozen;
pixels the model cannot explain stand out as bumps in the per-pixel free
energy.  Because the palette is re-estimated per frame, a global change of
illumination (or even a switch to a different kind of measurement) is
absorbed by the palette instead of showing up as foreground.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (EmConfig, IndexPrior, Palette, PimModel, Responsibilities, SignalGrid,
                   _check_pair, _relative_drop, as_grid, e_step, fit_pim, gaussian_loglik,
                   pixel_free_energy, weighted_gaussians)
from .errors import ConfigurationError, InvalidStateError

DEFAULT_BACKGROUND_S = 8
DEFAULT_MAD_MULTIPLIER = 10.0
DEFAULT_REFINE_ROUNDS = 5
# Scale factor turning a median absolute deviation into a Gaussian sigma.
MAD_TO_SIGMA = 1.4826


def bgsub_config(**overrides):
    """Test-time defaults: at most 50 palette iterations, tol 1e-6."""
    base = dict(max_iters=50, tol=1e-6)
    base.update(overrides)
    return EmConfig(**base)


@dataclass(eq=False)
class ForegroundResult:
    energy_map: np.ndarray
    mask: np.ndarray
    expected_background: SignalGrid
    inferred_palette: Palette
    responsibilities: Responsibilities
    threshold: float


def train_background(frames, S=DEFAULT_BACKGROUND_S, config: EmConfig | None = None) -> PimModel:
    return fit_pim(frames, S, config)


def _palette_update(grid, q, keep, config):
    x = grid.values.reshape(-1, grid.dim)
    w = q.reshape(-1, q.shape[-1])
    if keep is not None:
        k = keep.ravel()
        x, w = x[k], w[k]
    return Palette(*weighted_gaussians(x, w, config.variance_floor, config.mass_epsilon))


def _weighted_median(v, w):
    order = np.argsort(v, kind="stable")
    cw = np.cumsum(w[order])
    return v[order][min(np.searchsorted(cw, 0.5 * cw[-1]), len(v) - 1)]


def robust_palette(grid, weights, config: EmConfig | None = None) -> Palette:
    """Palette from weighted medians and scaled weighted MADs.

    Unlike the free-energy update, a minority of foreign pixels assigned to
    an entry barely moves its estimate.
    """
    config = config or bgsub_config()
    grid = as_grid(grid)
    x = grid.values.reshape(-1, grid.dim)
    w = np.asarray(weights, dtype=float).reshape(len(x), -1)
    S, D = w.shape[1], grid.dim
    means = np.empty((S, D))
    var = np.empty((S, D))
    global_var = np.maximum(x.var(0), config.variance_floor)
    for s in range(S):
        if w[:, s].sum() < config.mass_epsilon * len(x):
            means[s] = x.mean(0)
            var[s] = global_var
            continue
        for d in range(D):
            med = _weighted_median(x[:, d], w[:, s])
            mad = _weighted_median(np.abs(x[:, d] - med), w[:, s])
            means[s, d] = med
            var[s, d] = (MAD_TO_SIGMA * mad) ** 2
    return Palette(means, np.maximum(var, config.variance_floor))


def infer_test_palette(grid, prior: IndexPrior, S=None, config: EmConfig | None = None,
                       return_trace=False, exclude=None):
    """Fit a palette for one frame with the index prior held fixed.

    The palette starts from the prior itself used as responsibilities (so
    entry labels agree with the prior) and then alternates E steps and
    palette updates until the relative free-energy drop is below
    ``config.tol``.  Pixels flagged in the boolean ``exclude`` map still get
    responsibilities but do not contribute to the palette or to the traced
    free energy.
    """
    config = config or bgsub_config()
    grid = as_grid(grid)
    S = prior.size if S is None else S
    _check_pair(grid, S, prior)
    keep = None
    if exclude is not None:
        keep = ~np.asarray(exclude, dtype=bool)
        if keep.shape != (grid.height, grid.width):
            raise ConfigurationError("exclude mask must be I x J")
        if not keep.any():
            raise ConfigurationError("exclude mask removes every pixel")
    logp = prior.log()
    palette = _palette_update(grid, prior.probs, keep, config)
    trace = []
    for it in range(config.max_iters + 1):
        resps = e_step(grid, palette, prior)
        L = gaussian_loglik(grid.values, palette.means, palette.variances)
        F = pixel_free_energy(resps.probs, logp, L)
        trace.append(float(F.sum() if keep is None else F[keep].sum()))
        if it > 0 and _relative_drop(trace[-2], trace[-1]) < config.tol:
            break
        if it == config.max_iters:
            break
        palette = _palette_update(grid, resps.probs, keep, config)
    if return_trace:
        return palette, resps, trace
    return palette, resps


def pixelwise_free_energy(grid, palette: Palette, prior: IndexPrior, resps: Responsibilities):
    """Per-location free-energy terms; they sum to the frame's free energy."""
    grid = as_grid(grid)
    _check_pair(grid, palette.size, prior)
    L = gaussian_loglik(grid.values, palette.means, palette.variances)
    return pixel_free_energy(resps.probs, prior.log(), L)


def expected_background(resps: Responsibilities, palette: Palette) -> SignalGrid:
    """Responsibility-weighted palette means at every pixel."""
    if resps.size != palette.size:
        raise ConfigurationError(f"responsibilities S={resps.size} vs palette S={palette.size}")
    return SignalGrid(resps.probs @ palette.means)


def parse_threshold_policy(policy):
    """``"mad"``, ``"mad:<k>"`` or ``"fixed:<v>"`` -> (kind, value)."""
    if isinstance(policy, tuple):
        return policy
    text = str(policy).strip()
    kind, _, arg = text.partition(":")
    if kind == "mad":
        return "mad", float(arg) if arg else DEFAULT_MAD_MULTIPLIER
    if kind == "fixed" and arg:
        return "fixed", float(arg)
    raise ConfigurationError(f"bad threshold policy {policy!r}; use mad, mad:<k> or fixed:<v>")


def energy_threshold(energy_map, policy="mad"):
    kind, value = parse_threshold_policy(policy)
    if kind == "fixed":
        return value
    med = np.median(energy_map)
    mad = np.median(np.abs(energy_map - med))
    return float(med + value * mad)


def detect(grid, model, S=None, threshold_policy="mad", config: EmConfig | None = None,
           refine_rounds=DEFAULT_REFINE_ROUNDS) -> ForegroundResult:
    """Foreground mask for one frame against a trained background model.

    ``model`` is a :class:`PimModel` or a bare :class:`IndexPrior`.

    Foreground pixels are assigned to whatever entry the prior expects at
    their location, so a plain palette fit inflates that entry to cover
    them.  Detection therefore starts from :func:`robust_palette`, flags
    pixels above the threshold, and re-runs :func:`infer_test_palette` with
    the flagged pixels excluded from the palette fit, for up to
    ``refine_rounds`` rounds or until the mask stops changing.  With
    ``refine_rounds=0`` the plain free-energy fit is used.
    """
    if model is None:
        raise InvalidStateError("background model has not been trained")
    prior = model.prior if isinstance(model, PimModel) else model
    if not isinstance(prior, IndexPrior):
        raise InvalidStateError("background model has no index prior; train it first")
    grid = as_grid(grid)
    if refine_rounds > 0:
        palette = robust_palette(grid, prior.probs, config)
        resps = e_step(grid, palette, prior)
    else:
        palette, resps = infer_test_palette(grid, prior, S, config)
    energy = pixelwise_free_energy(grid, palette, prior, resps)
    thr = energy_threshold(energy, threshold_policy)
    mask = energy > thr
    for _ in range(refine_rounds):
        palette, resps = infer_test_palette(grid, prior, S, config,
                                            exclude=mask if 0 < mask.sum() < mask.size else None)
        energy = pixelwise_free_energy(grid, palette, prior, resps)
        thr = energy_threshold(energy, threshold_policy)
        new = energy > thr
        if np.array_equal(new, mask):
            break
        mask = new
    return ForegroundResult(energy_map=energy, mask=mask,
                            expected_background=expected_background(resps, palette),
                            inferred_palette=palette, responsibilities=resps, threshold=thr)
