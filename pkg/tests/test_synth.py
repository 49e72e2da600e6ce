import filecmp
import json

import numpy as np
import pytest

from pimaps import ConfigurationError, EmConfig, fit_pim, synth_pim_dataset, write_dataset
from pimaps.synth import separated_means

import oracles


@pytest.mark.parametrize("kind", ["pim", "tmpim", "bgsub", "hmm"])
def test_fixed_seed_is_deterministic(kind):
    a = synth_pim_dataset(kind, seed=7)
    b = synth_pim_dataset(kind, seed=7)
    assert a.truth == b.truth
    for g, h in zip(a.grids, b.grids):
        np.testing.assert_array_equal(g.values, h.values)


@pytest.mark.parametrize("kind", ["pim", "hmm"])
def test_written_trees_are_byte_identical(tmp_path, kind):
    write_dataset(synth_pim_dataset(kind, seed=3), tmp_path / "a")
    write_dataset(synth_pim_dataset(kind, seed=3), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    side = json.loads((tmp_path / "a" / "truth.json").read_text())
    assert side["kind"] == kind and len(side["files"]["signals"]) > 0


def test_entry_means_are_separated():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = separated_means(5, 2, 0.3, rng)
        d = np.linalg.norm(m[:, None] - m[None], axis=-1) + np.eye(5)
        assert d.min() >= 0.3


def test_tmpim_signals_follow_planted_shift():
    ds = synth_pim_dataset("tmpim", seed=1, flip_prob=0.0)
    cm = np.array(ds.truth["class_maps"])
    for t in range(5):
        c = ds.truth["classes"][t]
        dy, dx = ds.truth["shifts"][t]
        lab = np.array(ds.truth["labels"][t])
        for i in range(12):
            for j in range(12):
                assert lab[i, j] == cm[c, (i + dy) % 12, (j + dx) % 12]


def test_zero_separation_is_a_negative_control():
    ds = synth_pim_dataset("pim", seed=0, separation=0.0)
    for m in np.array(ds.truth["means"]):
        assert np.ptp(m) == 0
    fit = fit_pim(ds.grids, 3, EmConfig(seed=0))
    acc = oracles.best_permutation_agreement(fit.prior.argmax_map().tolist(),
                                             ds.truth["index_map"], 3)
    assert acc < 0.95  # nothing to recover when all entries coincide


def test_unknown_kind_and_bad_sizes():
    with pytest.raises(ConfigurationError):
        synth_pim_dataset("video")
    with pytest.raises(ConfigurationError):
        synth_pim_dataset("pim", S=0)
