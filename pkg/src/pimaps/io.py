"""Readers and writers: binary netpbm images, spectrogram CSV, JSON models, traces."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import EmConfig, IndexPrior, Palette, PimModel, SignalGrid, as_grid
from .errors import ConfigurationError, ParseError

SCHEMA_VERSION = "1.0"
MODEL_KINDS = ("pim", "tmpim", "pim_hmm")

_MAGIC_DIM = {b"P5": 1, b"P6": 3}


# ---------------------------------------------------------------- images

def _header_tokens(data, count, start):
    """Read ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens with their offsets and the offset just past the
    single whitespace byte that ends the last token.
    """
    tokens = []
    pos = start
    n = len(data)
    while len(tokens) < count:
        while pos < n and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise ParseError("header ended early", offset=pos)
        begin = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((data[begin:pos], begin))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise ParseError("header must end with a single whitespace byte", offset=pos)
    return tokens, pos + 1


def _header_int(tok, offset, what):
    if not tok.isdigit():
        raise ParseError(f"{what} is not a positive integer: {tok!r}", offset=offset)
    v = int(tok)
    if v < 1:
        raise ParseError(f"{what} must be positive, got {v}", offset=offset)
    return v


def parse_netpbm(data: bytes) -> SignalGrid:
    magic = data[:2]
    if magic not in _MAGIC_DIM:
        shown = magic.decode("latin-1") if magic else "<empty>"
        if magic in (b"P1", b"P2", b"P3", b"P4"):
            raise ParseError(f"unsupported netpbm variant {shown}; only binary P5/P6 are read",
                             offset=0)
        raise ParseError(f"not a binary PGM/PPM file (magic {shown!r})", offset=0)
    D = _MAGIC_DIM[magic]
    ((w, w_off), (h, h_off), (mx, mx_off)), body = _header_tokens(data, 3, 2)
    width = _header_int(w, w_off, "width")
    height = _header_int(h, h_off, "height")
    maxval = _header_int(mx, mx_off, "maxval")
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}; only 8-bit (255) images are read",
                         offset=mx_off)
    need = width * height * D
    payload = data[body:body + need]
    if len(payload) < need:
        raise ParseError(f"truncated payload: expected {need} bytes, found {len(payload)}",
                         offset=body + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, D)
    return SignalGrid(arr.astype(float) / 255.0)


def load_image(path) -> SignalGrid:
    """Binary PGM (D=1) or PPM (D=3, R,G,B), 8-bit, scaled to [0, 1]."""
    return parse_netpbm(Path(path).read_bytes())


def to_bytes(values):
    v = np.asarray(values, dtype=float)
    return np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8)


def save_image(path, values):
    """Write [0, 1] values as P5 (I x J or I x J x 1) or P6 (I x J x 3)."""
    v = values.values if isinstance(values, SignalGrid) else np.asarray(values, dtype=float)
    if v.ndim == 2:
        v = v[..., None]
    if v.ndim != 3 or v.shape[2] not in (1, 3):
        raise ConfigurationError(f"images must have 1 or 3 channels, got shape {v.shape}")
    magic = b"P5" if v.shape[2] == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (v.shape[1], v.shape[0])
    Path(path).write_bytes(header + to_bytes(v).tobytes())


def save_mask(path, mask):
    """Boolean mask as a 0/255 PGM."""
    save_image(path, np.asarray(mask, dtype=float))


def save_scaled(path, arr):
    """Min-max scale a real I x J array to [0, 1] and write it as PGM."""
    a = np.asarray(arr, dtype=float)
    span = a.max() - a.min()
    save_image(path, (a - a.min()) / span if span > 0 else np.zeros_like(a))


# ---------------------------------------------------------------- CSV

def load_spectrogram_csv(path) -> SignalGrid:
    """Rows are frequency bands, columns are frames; returns a D=1 grid."""
    rows = []
    with open(path, newline="") as fh:
        for r, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for c, cell in enumerate(row, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric cell {cell!r}", row=r, column=c) from None
                if not np.isfinite(v):
                    raise ParseError(f"non-finite cell {cell!r}", row=r, column=c)
                vals.append(v)
            if rows and len(vals) != len(rows[0]):
                raise ParseError(f"ragged row: {len(vals)} cells, expected {len(rows[0])}",
                                 row=r, column=min(len(vals), len(rows[0])) + 1)
            rows.append(vals)
    if not rows:
        raise ParseError(f"empty spectrogram file {path}")
    return SignalGrid(np.array(rows)[:, :, None])


def save_spectrogram_csv(path, grid):
    grid = as_grid(grid)
    if grid.dim != 1:
        raise ConfigurationError("spectrogram CSV holds D=1 grids only")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in grid.values[:, :, 0]:
            w.writerow([repr(float(v)) for v in row])


def save_array_csv(path, arr):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.atleast_2d(np.asarray(arr, dtype=float)):
            w.writerow([repr(float(v)) for v in row])


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "free_energy"])
        for it, F in enumerate(trace):
            w.writerow([it, repr(float(F))])


def read_trace_csv(path):
    with open(path, newline="") as fh:
        return [float(r["free_energy"]) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------- models

def _arr(a):
    # Python floats serialise with repr, which round-trips binary64 exactly.
    return np.asarray(a, dtype=float).tolist()


def _palettes_payload(palettes):
    return [{"means": _arr(p.means), "variances": _arr(p.variances)} for p in palettes]


def _model_payload(model):
    from .hmm import BandPalettes, HmmFit
    from .tmpim import TmpimFit, TmpimModel

    if isinstance(model, PimModel):
        return "pim", {"palette_size": model.palette_size, "prior": _arr(model.prior.probs),
                       "palettes": _palettes_payload(model.palettes),
                       "final_free_energy": float(model.final_free_energy)}
    if isinstance(model, TmpimFit):
        m = model.model
        return "tmpim", {"palette_size": m.palette_size, "class_prior": _arr(m.class_prior),
                         "class_pims": _arr(m.class_pims),
                         "transforms": m.tset.offsets.tolist(),
                         "transform_prior": _arr(m.tset.prior),
                         "palettes": _palettes_payload(model.palettes)}
    if isinstance(model, TmpimModel):
        return _model_payload(TmpimFit(model=model, palettes=[], posteriors=[], trace=[]))
    if isinstance(model, HmmFit):
        m = model.model
        return "pim_hmm", {"palette_size": m.palette_size, "initial": _arr(m.initial),
                           "transitions": _arr(m.transitions),
                           "index_priors": _arr(m.index_priors),
                           "palettes": [{"means": _arr(b.means), "variances": _arr(b.variances)}
                                        for b in model.palettes if isinstance(b, BandPalettes)]}
    from .hmm import PimHmm
    if isinstance(model, PimHmm):
        return _model_payload(HmmFit(model=model, palettes=[], posteriors=[], trace=[]))
    raise ConfigurationError(f"cannot serialise {type(model).__name__}")


def save_model(path, model, config: EmConfig | None = None, **metadata):
    """Write a model as JSON: schema version, kind, payload and metadata.

    ``model`` is a :class:`PimModel`, a TMPIM fit or model, or a PIM-HMM fit
    or model.  The config (including its seed) is echoed into the metadata.
    """
    kind, payload = _model_payload(model)
    meta = dict(metadata)
    if config is not None:
        meta["config"] = config.to_dict()
        meta["seed"] = config.seed
    doc = {"schema_version": SCHEMA_VERSION, "model_kind": kind, "payload": payload,
           "metadata": meta}
    Path(path).write_text(json.dumps(doc, indent=1))


def _load_palettes(items):
    return [Palette(np.array(p["means"], dtype=float), np.array(p["variances"], dtype=float))
            for p in items]


def load_model(path):
    """Inverse of :func:`save_model`.

    Returns ``(kind, model, metadata)`` where ``model`` is a
    :class:`PimModel`, a ``TmpimFit`` or an ``HmmFit`` (posteriors and trace
    empty).
    """
    from .hmm import BandPalettes, HmmFit, PimHmm
    from .tmpim import TmpimFit, TmpimModel
    from .transform import TransformSet

    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"model file is not valid JSON: {exc.msg}", offset=exc.pos) from None
    for key in ("schema_version", "model_kind", "payload"):
        if key not in doc:
            raise ParseError(f"model file lacks {key!r}")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema version {doc['schema_version']!r}")
    kind, p, meta = doc["model_kind"], doc["payload"], doc.get("metadata", {})
    try:
        if kind == "pim":
            model = PimModel(prior=IndexPrior(np.array(p["prior"], dtype=float)),
                             palette_size=int(p["palette_size"]),
                             palettes=_load_palettes(p["palettes"]),
                             final_free_energy=float(p["final_free_energy"]))
        elif kind == "tmpim":
            tset = TransformSet([tuple(t) for t in p["transforms"]],
                                np.array(p["transform_prior"], dtype=float))
            m = TmpimModel(class_prior=np.array(p["class_prior"], dtype=float),
                           class_pims=np.array(p["class_pims"], dtype=float),
                           tset=tset, palette_size=int(p["palette_size"]))
            model = TmpimFit(model=m, palettes=_load_palettes(p["palettes"]),
                             posteriors=[], trace=[])
        elif kind == "pim_hmm":
            m = PimHmm(initial=np.array(p["initial"], dtype=float),
                       transitions=np.array(p["transitions"], dtype=float),
                       index_priors=np.array(p["index_priors"], dtype=float),
                       palette_size=int(p["palette_size"]))
            pals = [BandPalettes(np.array(b["means"], dtype=float),
                                 np.array(b["variances"], dtype=float)) for b in p["palettes"]]
            model = HmmFit(model=m, palettes=pals, posteriors=[], trace=[])
        else:
            raise ParseError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    except KeyError as exc:
        raise ParseError(f"{kind} payload lacks field {exc.args[0]!r}") from None
    return kind, model, meta
