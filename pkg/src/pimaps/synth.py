"""Planted-truth synthetic datasets.

Every generator draws hidden structure first (index maps, classes, shifts,
state paths), then per-signal palettes whose entry means sit at least
``separation * sigma`` apart, and finally samples measurements from the
diagonal Gaussian of each pixel's entry.  The hidden structure is returned
alongside the data so learners can be scored against it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import SignalGrid
from .errors import ConfigurationError
from .transform import Transform, apply_transform


@dataclass
class PlantedDataset:
    kind: str
    grids: list
    truth: dict
    extra: dict = field(default_factory=dict)


def random_index_map(I, J, S, rng, smoothness=1.2, min_share=0.25, max_tries=200):
    """Blobby index map: argmax over S independently smoothed noise fields.

    Maps are redrawn until every index covers at least ``min_share / S`` of
    the grid, so all palette entries are actually used.
    """
    need = min_share * I * J / S
    for _ in range(max_tries):
        fields = rng.standard_normal((S, I, J))
        fields = np.stack([gaussian_filter(f, smoothness, mode="wrap") for f in fields])
        m = np.argmax(fields, axis=0)
        if np.bincount(m.ravel(), minlength=S).min() >= need:
            return m
    return m


def separated_means(S, D, min_dist, rng, low=0.0, high=1.0, max_tries=2000):
    """S points in the box [low, high]^D with pairwise distance >= min_dist.

    The box widens when it cannot fit the points.  ``min_dist == 0``
    collapses every entry onto a single mean.
    """
    if min_dist <= 0:
        return np.repeat(rng.uniform(low, high, size=(1, D)), S, axis=0)
    lo, hi = float(low), float(high)
    while True:
        pts = []
        tries = 0
        while len(pts) < S and tries < max_tries:
            cand = rng.uniform(lo, hi, size=D)
            if all(np.linalg.norm(cand - p) >= min_dist for p in pts):
                pts.append(cand)
            tries += 1
        if len(pts) == S:
            return np.array(pts)
        pad = 0.25 * (hi - lo)
        lo, hi = lo - pad, hi + pad


def _flip(index_map, S, flip_prob, rng):
    if flip_prob <= 0:
        return index_map.copy()
    flips = rng.random(index_map.shape) < flip_prob
    out = index_map.copy()
    out[flips] = rng.integers(0, S, size=int(flips.sum()))
    return out


def _render(index_map, means, sigma, rng):
    D = means.shape[1]
    return means[index_map] + sigma * rng.standard_normal(index_map.shape + (D,))


def _check(**kw):
    for name, v in kw.items():
        if v is None or v < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {v}")


def planted_pim(rng, height=8, width=8, S=3, T=20, separation=10.0, sigma=0.02,
                dim=1, flip_prob=0.0, low=0.1, high=0.9):
    """One hard index map shared by T signals, each with its own palette."""
    _check(height=height, width=width, S=S, T=T, dim=dim)
    if separation < 0:
        raise ConfigurationError("separation must be >= 0")
    index_map = random_index_map(height, width, S, rng)
    grids, labels, means = [], [], []
    for _ in range(T):
        mu = separated_means(S, dim, separation * sigma, rng, low, high)
        lab = _flip(index_map, S, flip_prob, rng)
        grids.append(SignalGrid(_render(lab, mu, sigma, rng)))
        labels.append(lab)
        means.append(mu)
    truth = {"index_map": index_map.tolist(), "labels": np.array(labels).tolist(),
             "means": np.array(means).tolist(), "sigma": sigma}
    return PlantedDataset("pim", grids, truth)


def planted_tmpim(rng, height=12, width=12, S=3, T=40, C=2, max_shift=3, separation=10.0,
                  sigma=0.02, dim=1, flip_prob=0.0, low=0.1, high=0.9):
    """C class index maps; each signal picks a class and a cyclic shift."""
    _check(height=height, width=width, S=S, T=T, C=C, dim=dim)
    class_maps = np.array([random_index_map(height, width, S, rng) for _ in range(C)])
    classes = np.arange(T) % C
    rng.shuffle(classes)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(T, 2))
    grids, labels = [], []
    for t in range(T):
        shifted = apply_transform(class_maps[classes[t]], Transform(*shifts[t]))
        lab = _flip(shifted, S, flip_prob, rng)
        mu = separated_means(S, dim, separation * sigma, rng, low, high)
        grids.append(SignalGrid(_render(lab, mu, sigma, rng)))
        labels.append(lab)
    truth = {"class_maps": class_maps.tolist(), "classes": classes.tolist(),
             "shifts": shifts.tolist(), "labels": np.array(labels).tolist(), "sigma": sigma}
    return PlantedDataset("tmpim", grids, truth)


def planted_background(rng, height=32, width=32, S=8, T=20, separation=10.0, sigma=0.04,
                       dim=3, blob_fraction=0.05, illumination=0.3, blob_separation=20.0,
                       gain_range=(0.8, 1.2), flip_prob=0.0):
    """Background frames, a clean test frame and a test frame with a foreground blob.

    Training frames share one index map and one base palette under a random
    global gain per frame.  Both test frames are rendered with the base
    palette and then scaled as a whole by ``illumination``.  The blob colour
    lies at least ``blob_separation * sigma`` from every palette mean.
    """
    _check(height=height, width=width, S=S, T=T, dim=dim)
    index_map = random_index_map(height, width, S, rng, smoothness=1.5)
    base = separated_means(S, dim, separation * sigma, rng, 0.1, 0.9)
    frames = []
    for _ in range(T):
        gain = rng.uniform(*gain_range)
        lab = _flip(index_map, S, flip_prob, rng)
        frames.append(SignalGrid(gain * _render(lab, base, sigma, rng)))

    side = max(1, int(round(np.sqrt(blob_fraction * height * width))))
    r0 = int(rng.integers(0, height - side + 1))
    c0 = int(rng.integers(0, width - side + 1))
    mask = np.zeros((height, width), dtype=bool)
    mask[r0:r0 + side, c0:c0 + side] = True
    span = base.max() - base.min() + 2 * blob_separation * sigma
    while True:
        blob = rng.uniform(base.min() - span, base.max() + span, size=dim)
        if np.min(np.linalg.norm(base - blob, axis=1)) >= blob_separation * sigma:
            break

    clean = _render(index_map, base, sigma, rng)
    fg = _render(index_map, base, sigma, rng)
    fg[mask] = blob + sigma * rng.standard_normal((int(mask.sum()), dim))
    extra = {"test_background": [SignalGrid(illumination * clean)],
             "test_foreground": [SignalGrid(illumination * fg)]}
    truth = {"index_map": index_map.tolist(), "base_means": base.tolist(),
             "blob_mask": mask.astype(int).tolist(), "blob_mean": blob.tolist(),
             "illumination": illumination, "sigma": sigma}
    return PlantedDataset("bgsub", frames, truth, extra)


def left_right_transitions(K, stay):
    A = np.zeros((K, K))
    for k in range(K - 1):
        A[k, k] = stay
        A[k, k + 1] = 1 - stay
    A[K - 1, K - 1] = 1.0
    return A


def planted_hmm(rng, n_words=2, bands=6, S=3, K=4, n_train=10, n_test=10,
                frames=(18, 26), separation=10.0, sigma=0.5, sharpness=0.9,
                test_offset=5.0):
    """Word models with state-conditioned per-band index distributions.

    Utterances get fresh per-band palettes whose means increase with the
    index (random offset, gaps of 1 to 1.5 times ``separation * sigma``).
    Test utterances additionally receive a per-band constant offset drawn
    from U(-test_offset, test_offset).
    """
    _check(n_words=n_words, bands=bands, S=S, K=K, n_train=n_train)
    words = []
    for _ in range(n_words):
        hot = rng.integers(0, S, size=(bands, K))
        priors = np.full((bands, K, S), (1 - sharpness) / max(S - 1, 1))
        np.put_along_axis(priors, hot[..., None], sharpness if S > 1 else 1.0, axis=-1)
        words.append(priors)
    mean_len = 0.5 * (frames[0] + frames[1])
    stay = max(0.0, 1.0 - K / mean_len)
    A = left_right_transitions(K, stay)

    grids, word_ids, split, paths, offsets = [], [], [], [], []
    for w, priors in enumerate(words):
        for n in range(n_train + n_test):
            J = int(rng.integers(frames[0], frames[1] + 1))
            path = [0]
            for _ in range(J - 1):
                path.append(int(rng.choice(K, p=A[path[-1]])))
            path = np.array(path)
            idx = np.empty((bands, J), dtype=int)
            for i in range(bands):
                for j in range(J):
                    idx[i, j] = rng.choice(S, p=priors[i, path[j]])
            gaps = separation * sigma * rng.uniform(1.0, 1.5, size=(bands, S))
            gaps[:, 0] = 0.0
            means = rng.uniform(0.0, 5.0, size=(bands, 1)) + np.cumsum(gaps, axis=1)
            x = np.take_along_axis(means, idx, axis=1) + sigma * rng.standard_normal((bands, J))
            is_test = n >= n_train
            off = rng.uniform(-test_offset, test_offset, size=bands) if is_test else np.zeros(bands)
            x = x + off[:, None]
            grids.append(SignalGrid(x[:, :, None]))
            word_ids.append(w)
            split.append("test" if is_test else "train")
            paths.append(path.tolist())
            offsets.append(off.tolist())
    truth = {"word": word_ids, "split": split, "paths": paths, "offsets": offsets,
             "index_priors": [p.tolist() for p in words], "transitions": A.tolist(),
             "sigma": sigma}
    return PlantedDataset("hmm", grids, truth)


_GENERATORS = {"pim": planted_pim, "tmpim": planted_tmpim,
               "bgsub": planted_background, "hmm": planted_hmm}


def synth_pim_dataset(kind, seed=0, **params) -> PlantedDataset:
    """Dispatch to a planted generator with an RNG derived from ``seed``."""
    if kind not in _GENERATORS:
        raise ConfigurationError(f"unknown dataset kind {kind!r}; choose from {sorted(_GENERATORS)}")
    return _GENERATORS[kind](np.random.default_rng(seed), **params)


def write_dataset(ds: PlantedDataset, out_dir):
    """Write data files plus a ``truth.json`` sidecar listing them.

    Image datasets are clipped to [0, 1] and stored as 8-bit PGM (D=1) or
    PPM (D=3); spectrogram datasets are stored as CSV.
    """
    from .io import save_image, save_spectrogram_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def put(prefix, grids):
        names = []
        for n, g in enumerate(grids):
            if ds.kind == "hmm":
                # word and split in the name let shell globs pick a training set
                w, split = ds.truth["word"][n], ds.truth["split"][n]
                name = f"w{w}_{split}_{n:04d}.csv"
                save_spectrogram_csv(out / name, g)
            else:
                name = f"{prefix}_{n:04d}.{'pgm' if g.dim == 1 else 'ppm'}"
                save_image(out / name, np.clip(g.values, 0.0, 1.0))
            names.append(name)
        return names

    files = {"signals": put("signal", ds.grids)}
    for key, grids in ds.extra.items():
        files[key] = put(key, grids)
    sidecar = {"kind": ds.kind, "files": files, "truth": ds.truth}
    (out / "truth.json").write_text(json.dumps(sidecar, indent=1))
    return out
