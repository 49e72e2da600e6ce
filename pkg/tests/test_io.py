import numpy as np
import pytest

from pimaps import (EmConfig, ParseError, SignalGrid, TransformSet, e_step, fit_pim, fit_pim_hmm,
                    fit_tmpim, free_energy, hmm_e_step, load_image, load_model,
                    load_spectrogram_csv, save_image, save_model, save_spectrogram_csv,
                    tmpim_e_step, write_trace_csv)
from pimaps.io import parse_netpbm, read_trace_csv
from pimaps.synth import planted_hmm, planted_pim, planted_tmpim


# ---------------------------------------------------------------- netpbm

def test_p5_bytes_to_values(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    g = load_image(p)
    assert g.shape == (2, 2, 1)
    np.testing.assert_array_equal(g.values[..., 0], [[0, 128 / 255], [1, 64 / 255]])


def test_p6_channel_order(tmp_path):
    p = tmp_path / "a.ppm"
    p.write_bytes(b"P6 1 1 255\n" + bytes([10, 20, 30]))
    g = load_image(p)
    np.testing.assert_array_equal(g.values[0, 0], np.array([10, 20, 30]) / 255)


def test_header_comments_are_skipped():
    g = parse_netpbm(b"P5\n# made by hand\n3 1\n# depth\n255\n" + bytes([1, 2, 3]))
    assert g.shape == (1, 3, 1)


@pytest.mark.parametrize("magic", [b"P2", b"P3"])
def test_text_variants_rejected_by_magic(magic):
    with pytest.raises(ParseError, match=magic.decode()) as err:
        parse_netpbm(magic + b"\n1 1\n255\n0\n")
    assert err.value.offset == 0


def test_truncated_payload_reports_offset():
    with pytest.raises(ParseError, match="truncated") as err:
        parse_netpbm(b"P5\n2 2\n255\n" + bytes([1, 2]))
    assert err.value.offset == 13


def test_sixteen_bit_rejected():
    with pytest.raises(ParseError, match="maxval") as err:
        parse_netpbm(b"P5\n1 1\n65535\n" + bytes([0, 0]))
    assert err.value.offset == 7


@pytest.mark.parametrize("data", [b"", b"P5\n2", b"P5\n2 x\n255\n", b"P5\n0 2\n255\n"])
def test_malformed_headers(data):
    with pytest.raises(ParseError):
        parse_netpbm(data)


def test_image_round_trip(tmp_path, rng):
    v = np.rint(rng.random((4, 5, 3)) * 255) / 255
    save_image(tmp_path / "x.ppm", v)
    np.testing.assert_array_equal(load_image(tmp_path / "x.ppm").values, v)
    save_image(tmp_path / "y.pgm", v[..., 0])
    np.testing.assert_array_equal(load_image(tmp_path / "y.pgm").values[..., 0], v[..., 0])


# ---------------------------------------------------------------- CSV

def test_csv_shape(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("1,2,3\n4,5,6\n")
    g = load_spectrogram_csv(p)
    assert g.shape == (2, 3, 1)


def test_empty_csv(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("")
    with pytest.raises(ParseError, match="empty"):
        load_spectrogram_csv(p)


def test_ragged_csv(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("1,2,3\n4,5\n")
    with pytest.raises(ParseError) as err:
        load_spectrogram_csv(p)
    assert err.value.row == 2


def test_non_numeric_cell(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("1,2\n3,abc\n")
    with pytest.raises(ParseError) as err:
        load_spectrogram_csv(p)
    assert (err.value.row, err.value.column) == (2, 2)


def test_csv_round_trip_exact(tmp_path, rng):
    g = SignalGrid(rng.normal(size=(3, 7)))
    save_spectrogram_csv(tmp_path / "s.csv", g)
    np.testing.assert_array_equal(load_spectrogram_csv(tmp_path / "s.csv").values, g.values)


def test_trace_csv(tmp_path):
    write_trace_csv(tmp_path / "t.csv", [3.0, 2.5, 2.25])
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "iteration,free_energy"
    assert read_trace_csv(tmp_path / "t.csv") == [3.0, 2.5, 2.25]


# ---------------------------------------------------------------- models

def test_pim_round_trip(tmp_path):
    ds = planted_pim(np.random.default_rng(0), T=5)
    cfg = EmConfig(seed=9)
    m = fit_pim(ds.grids, 3, cfg)
    save_model(tmp_path / "m.json", m, cfg)
    kind, m2, meta = load_model(tmp_path / "m.json")
    assert kind == "pim" and meta["seed"] == 9 and meta["config"]["tol"] == cfg.tol
    np.testing.assert_array_equal(m2.prior.probs, m.prior.probs)
    for a, b in zip(m.palettes, m2.palettes):
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.variances, b.variances)
    F = lambda mod: free_energy(ds.grids, mod.palettes, mod.prior,
                                [e_step(g, p, mod.prior) for g, p in zip(ds.grids, mod.palettes)])
    assert abs(F(m2) - F(m)) < 1e-9


def test_tmpim_round_trip(tmp_path):
    ds = planted_tmpim(np.random.default_rng(0), T=6, height=6, width=6, max_shift=1)
    fit = fit_tmpim(ds.grids, 2, 3, TransformSet.shifts(6, 6, 1, 1), EmConfig(max_iters=5))
    save_model(tmp_path / "m.json", fit)
    kind, fit2, _ = load_model(tmp_path / "m.json")
    assert kind == "tmpim"
    np.testing.assert_array_equal(fit2.model.class_pims, fit.model.class_pims)
    assert fit2.model.tset.transforms == fit.model.tset.transforms
    a = tmpim_e_step(ds.grids[0], fit.palettes[0], fit.model).free_energy
    b = tmpim_e_step(ds.grids[0], fit2.palettes[0], fit2.model).free_energy
    assert abs(a - b) < 1e-9


def test_hmm_round_trip(tmp_path):
    ds = planted_hmm(np.random.default_rng(0), n_words=1, n_train=3, n_test=0)
    fit = fit_pim_hmm(ds.grids, 3, 3, EmConfig(max_iters=5))
    save_model(tmp_path / "m.json", fit)
    kind, fit2, _ = load_model(tmp_path / "m.json")
    assert kind == "pim_hmm"
    np.testing.assert_array_equal(fit2.model.transitions, fit.model.transitions)
    a = hmm_e_step(ds.grids[0], fit.model, fit.palettes[0]).free_energy
    b = hmm_e_step(ds.grids[0], fit2.model, fit2.palettes[0]).free_energy
    assert abs(a - b) < 1e-9


def test_bad_model_files(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("{not json")
    with pytest.raises(ParseError):
        load_model(p)
    p.write_text('{"schema_version": "1.0", "model_kind": "svm", "payload": {}}')
    with pytest.raises(ParseError, match="svm"):
        load_model(p)
    p.write_text('{"schema_version": "9", "model_kind": "pim", "payload": {}}')
    with pytest.raises(ParseError, match="schema"):
        load_model(p)
    p.write_text('{"schema_version": "1.0", "model_kind": "pim", "payload": {}}')
    with pytest.raises(ParseError, match="lacks"):
        load_model(p)
