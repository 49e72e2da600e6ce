"""Initialisation: per-signal k-means palettes and cross-signal label agreement.

Palettes are local to each signal, so k-means labels are arbitrary per
signal.  Since the likelihood of well-separated palettes swamps any prior,
EM cannot swap those labels by itself; they are made consistent up front by
matching every signal's hard labelling to a small set of prototype index
maps over entry permutations (and, for transformed models, cyclic shifts).
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import linear_sum_assignment

from .core import Palette


def kmeans_palette(x, S, rng, config, sort_by_mean=False):
    """k-means (best of ``config.kmeans_restarts``) on ``x`` of shape (N, D).

    Returns ``(palette, labels)``.  Clusters with fewer than two members get
    the global variance.
    """
    x = np.asarray(x, dtype=float)
    N, D = x.shape
    floor = config.variance_floor
    global_var = np.maximum(x.var(0), floor)
    uniq = np.unique(x, axis=0)
    if len(uniq) <= S:
        cent = np.concatenate([uniq, np.repeat(uniq[-1:], S - len(uniq), axis=0)])
        labels = np.argmin(((x[:, None, :] - cent) ** 2).sum(-1), axis=1)
    else:
        best = None
        for _ in range(config.kmeans_restarts):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cent, lab = kmeans2(x, S, iter=config.kmeans_iters, minit="++", rng=rng)
            inertia = ((x - cent[lab]) ** 2).sum()
            if best is None or inertia < best[0]:
                best = (inertia, cent, lab)
        _, cent, labels = best
    means = np.empty((S, D))
    var = np.empty((S, D))
    for s in range(S):
        members = x[labels == s]
        if len(members) >= 2:
            means[s] = members.mean(0)
            var[s] = np.maximum(members.var(0), floor)
        else:
            means[s] = members[0] if len(members) else cent[s]
            var[s] = global_var
    if sort_by_mean:
        order = np.argsort(means[:, 0], kind="stable")
        inverse = np.empty(S, dtype=int)
        inverse[order] = np.arange(S)
        means, var, labels = means[order], var[order], inverse[labels]
    return Palette(means, var), labels


def shift_indices(I, J, shifts):
    """Row/column gather indices so that ``a[rows[m][:, None], cols[m]]`` equals
    ``a`` read at ``((i + dy_m) % I, (j + dx_m) % J)``."""
    shifts = np.asarray(shifts, dtype=int).reshape(-1, 2)
    rows = (np.arange(I)[None, :] + shifts[:, :1]) % I
    cols = (np.arange(J)[None, :] + shifts[:, 1:]) % J
    return rows, cols


def gather_shifted(a, rows, cols):
    """Stack of shifted copies of ``a`` (I, J, ...) -> (M, I, J, ...)."""
    return a[rows[:, :, None], cols[:, None, :]]


@dataclass
class Alignment:
    classes: np.ndarray   # (T,) class per signal
    shifts: np.ndarray    # (T, 2) shift per signal, in [0, I) x [0, J)
    perms: np.ndarray     # (T, S) signal entry a -> prototype entry perms[t, a]
    prototypes: np.ndarray  # (C, I, J, S) smoothed index maps
    scores: np.ndarray    # (T,) alignment log score of each signal


def _best_matches(onehot, log_proto, shifts, perms):
    """Best (shift, permutation) for every signal against one prototype.

    Returns (score, shift index, permutation) arrays over signals.
    """
    T, I, J, S = onehot.shape
    rows, cols = shift_indices(I, J, shifts)
    stack = gather_shifted(log_proto, rows, cols).reshape(len(shifts), I * J, S)
    # table[t, m, a, b] = sum over pixels with label a of log proto_b at the shifted site
    table = np.einsum("tpa,mpb->tmab", onehot.reshape(T, I * J, S), stack, optimize=True)
    if perms is not None:
        vals = table[:, :, np.arange(S), perms].sum(-1)  # (T, M, P)
        flat = vals.reshape(T, -1)
        k = np.argmax(flat, axis=1)
        m, p = np.divmod(k, perms.shape[0])
        return flat[np.arange(T), k], m, perms[p]
    score = np.full(T, -np.inf)
    best_m = np.zeros(T, dtype=int)
    best_p = np.tile(np.arange(S), (T, 1))
    for t in range(T):
        for m in range(len(shifts)):
            r, c = linear_sum_assignment(table[t, m], maximize=True)
            v = table[t, m, r, c].sum()
            if v > score[t]:
                score[t], best_m[t], best_p[t] = v, m, c
    return score, best_m, best_p


def align_labelings(labels, S, n_classes, shifts, rng, smoothing=0.1, max_rounds=20):
    """Hard clustering of label maps up to entry permutation and cyclic shift.

    A k-medoids style loop: prototypes are seeded farthest-first, every
    signal is assigned to the (class, shift, permutation) with the highest
    log score under the smoothed prototype, and prototypes are re-averaged
    from their aligned members until assignments stop changing.
    """
    labels = np.asarray(labels)
    T, I, J = labels.shape
    shifts = np.asarray(shifts, dtype=int).reshape(-1, 2)
    onehot = np.eye(S)[labels]
    perms = np.array(list(itertools.permutations(range(S)))) if S <= 6 else None

    def smooth(avg):
        return (1 - smoothing) * avg + smoothing / S

    def canonical(t, shift, perm):
        relabeled = np.eye(S)[perm[labels[t]]]
        return np.roll(relabeled, tuple(shift), axis=(0, 1))

    def match_all(protos):
        res = [_best_matches(onehot, np.log(p), shifts, perms) for p in protos]
        scores = np.stack([r[0] for r in res])  # (C, T)
        return scores, res

    first = int(rng.integers(T))
    protos = [smooth(onehot[first])]
    while len(protos) < n_classes:
        scores, _ = match_all(protos)
        protos.append(smooth(onehot[int(np.argmin(scores.max(0)))]))

    prev = None
    for _ in range(max_rounds):
        scores, res = match_all(protos)
        cls = np.argmax(scores, axis=0)
        sh = np.array([shifts[res[c][1][t]] for t, c in enumerate(cls)])
        pm = np.array([res[c][2][t] for t, c in enumerate(cls)])
        state = (cls.tobytes(), sh.tobytes(), pm.tobytes())
        if state == prev:
            break
        prev = state
        best = scores.max(0)
        for c in range(n_classes):
            members = np.flatnonzero(cls == c)
            if len(members) == 0:
                worst = int(np.argmin(best))
                protos[c] = smooth(onehot[worst])
                continue
            avg = np.mean([canonical(t, sh[t], pm[t]) for t in members], axis=0)
            protos[c] = smooth(avg)

    return Alignment(classes=cls, shifts=sh, perms=pm,
                     prototypes=np.array(protos), scores=scores.max(0))


def relabel_palette(palette, perm):
    """Move entry ``a`` of ``palette`` to position ``perm[a]``."""
    order = np.argsort(perm)
    return palette.permuted(order)


def initial_palettes(grids, S, rng, config):
    """k-means palettes for each signal, relabelled to a common index convention."""
    fits = [kmeans_palette(g.values.reshape(-1, g.dim), S, rng, config) for g in grids]
    if len(grids) == 1 or S == 1:
        return [p for p, _ in fits]
    I, J = grids[0].height, grids[0].width
    labels = np.array([lab.reshape(I, J) for _, lab in fits])
    al = align_labelings(labels, S, 1, [(0, 0)], rng)
    return [relabel_palette(p, al.perms[t]) for t, (p, _) in enumerate(fits)]
