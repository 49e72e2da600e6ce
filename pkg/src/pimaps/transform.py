"""Cyclic 2-D translations and likelihood scoring over a discrete shift set.

A transform ``T = (dy, dx)`` maps location ``(i, j)`` to
``((i + dy) mod I, (j + dx) mod J)``.  An observation at ``(i, j)`` is
generated from the index-map entry at ``T(i, j)``, so the index statistics
seen by the image are ``stat[T(i, j)]``.

Scores are computed per palette entry: one log-density image per entry is
correlated against the matching layer of the shifted index statistics, so
the cost grows linearly with the palette size.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import NORM_TOL, as_grid, gaussian_loglik
from .errors import ConfigurationError, InvalidInputError

# An "entry stat image" is a plain (I, J, S) array whose layer k holds the
# (soft) indicator of palette entry k; layers sum to one at every location.


@dataclass(frozen=True)
class Transform:
    dy: int = 0
    dx: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dy", int(self.dy))
        object.__setattr__(self, "dx", int(self.dx))

    def normalized(self, height, width):
        return Transform(self.dy % height, self.dx % width)

    def inverse(self):
        return Transform(-self.dy, -self.dx)

    def then(self, other):
        """Shift by ``self`` and then by ``other``."""
        return Transform(self.dy + other.dy, self.dx + other.dx)

    def is_identity(self, height=None, width=None):
        if height is None:
            return self.dy == 0 and self.dx == 0
        t = self.normalized(height, width)
        return t.dy == 0 and t.dx == 0


def apply_transform(stat, t: Transform):
    """Read ``stat`` through ``t``: ``out[i, j] = stat[(i + dy) % I, (j + dx) % J]``.

    Works on any array whose first two axes are the grid.
    """
    stat = np.asarray(stat)
    return np.roll(stat, (-t.dy, -t.dx), axis=(0, 1))


def check_stat(stat):
    stat = np.asarray(stat, dtype=float)
    if stat.ndim != 3:
        raise ConfigurationError(f"entry statistics must be I x J x S, got shape {stat.shape}")
    if np.any(stat < 0) or np.max(np.abs(stat.sum(-1) - 1)) > NORM_TOL:
        raise InvalidInputError("entry statistics must be non-negative with layers summing to 1")
    return stat


class TransformSet:
    """An ordered list of transforms with a prior over them."""

    def __init__(self, transforms, prior=None):
        self.transforms = [t if isinstance(t, Transform) else Transform(*t) for t in transforms]
        if not self.transforms:
            raise ConfigurationError("transform set is empty")
        if not any(t.is_identity() for t in self.transforms):
            raise ConfigurationError("transform set must contain the identity (0, 0)")
        if len(set(self.transforms)) != len(self.transforms):
            raise ConfigurationError("transform set contains duplicates")
        M = len(self.transforms)
        if prior is None:
            prior = np.full(M, 1.0 / M)
        prior = np.asarray(prior, dtype=float)
        if prior.shape != (M,) or np.any(prior < 0) or abs(prior.sum() - 1) > NORM_TOL:
            raise ConfigurationError("transform prior must be a probability vector over the set")
        self.prior = prior

    @classmethod
    def identity(cls):
        return cls([Transform(0, 0)])

    @classmethod
    def shifts(cls, height, width, dy_max, dx_max, prior=None):
        """All cyclic shifts with |dy| <= dy_max and |dx| <= dx_max, stored as
        non-negative representatives (identity first, duplicates dropped)."""
        if dy_max < 0 or dx_max < 0:
            raise ConfigurationError("shift ranges must be non-negative")
        seen = []
        for dy in range(-dy_max, dy_max + 1):
            for dx in range(-dx_max, dx_max + 1):
                t = Transform(dy, dx).normalized(height, width)
                if t not in seen:
                    seen.append(t)
        seen.sort(key=lambda t: (not t.is_identity(), t.dy, t.dx))
        return cls(seen, prior)

    def __len__(self):
        return len(self.transforms)

    def __iter__(self):
        return iter(self.transforms)

    def __getitem__(self, m):
        return self.transforms[m]

    @cached_property
    def offsets(self):
        return np.array([(t.dy, t.dx) for t in self.transforms], dtype=int)

    @property
    def log_prior(self):
        with np.errstate(divide="ignore"):
            return np.log(self.prior)

    def index(self, t: Transform, height, width):
        t = t.normalized(height, width)
        for m, u in enumerate(self.transforms):
            if u.normalized(height, width) == t:
                return m
        raise KeyError(t)


def transform_scores(grid, palette, stat, tset: TransformSet, method="direct"):
    """Expected transformed log-likelihood of ``grid`` for every transform in ``tset``.

    ``score[m] = sum_ij sum_k stat[T_m(ij), k] * log N(x_ij; mu_k, Phi_k)``,
    which reduces to the hard-assignment log-likelihood when ``stat`` is
    one-hot.  ``method="fft"`` evaluates all cyclic correlations at once.
    """
    grid = as_grid(grid)
    stat = check_stat(stat)
    I, J = grid.height, grid.width
    if stat.shape != (I, J, palette.size):
        raise ConfigurationError(
            f"stat shape {stat.shape} does not match grid {I} x {J} and palette S={palette.size}")
    if grid.dim != palette.dim:
        raise ConfigurationError(f"grid D={grid.dim} does not match palette D={palette.dim}")
    # One log-density image per palette entry.
    L = gaussian_loglik(grid.values, palette.means, palette.variances)
    if method == "direct":
        return np.array([np.sum(apply_transform(stat, t) * L) for t in tset])
    if method == "fft":
        FL = np.fft.fft2(L, axes=(0, 1))
        Fs = np.fft.fft2(stat, axes=(0, 1))
        corr = np.fft.ifft2(np.conj(FL) * Fs, axes=(0, 1)).real.sum(-1)
        off = tset.offsets
        return corr[off[:, 0] % I, off[:, 1] % J]
    raise ConfigurationError(f"unknown method {method!r}")
