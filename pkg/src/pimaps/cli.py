"""Command-line interface: ``pimaps <command> [options]``.

Every training command writes ``model.json`` and ``trace.csv`` (iteration,
free energy) into ``--out``.  Inputs are files or directories; a directory
written by ``synth`` contributes the files listed as its signals, any other
directory contributes every file of the matching type in name order.

Exit status is 0 on success, 2 for usage errors and 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bgsub, io
from .core import EmConfig, fit_pim
from .errors import PimError
from .hmm import DEFAULT_HMM_S, TOPOLOGIES, classify_utterance, fit_pim_hmm
from .synth import synth_pim_dataset, write_dataset
from .tmpim import cluster_assignments, fit_tmpim
from .transform import TransformSet

log = logging.getLogger("pimaps")

IMAGE_SUFFIXES = (".pgm", ".ppm")
CSV_SUFFIXES = (".csv",)


class UsageError(Exception):
    pass


def _shifts(text):
    try:
        dy, dx = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected dy_max,dx_max, got {text!r}") from None
    if dy < 0 or dx < 0:
        raise argparse.ArgumentTypeError("shift ranges must be non-negative")
    return dy, dx


def _policy(text):
    try:
        bgsub.parse_threshold_policy(text)
    except PimError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive count, got {v}")
    return v


def _sidecar(directory):
    path = Path(directory) / "truth.json"
    return json.loads(path.read_text()) if path.is_file() else None


def expand_inputs(paths, suffixes):
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            side = _sidecar(p)
            if side is not None:
                files.extend(p / name for name in side["files"]["signals"])
            else:
                files.extend(sorted(f for f in p.iterdir() if f.suffix.lower() in suffixes))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such input: {p}")
    if not files:
        raise UsageError("no input files found")
    return files


def _config(args, **defaults):
    kw = dict(defaults)
    for name in ("tol", "max_iters", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    return EmConfig(**kw)


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def _load(path, kind):
    got, model, meta = io.load_model(path)
    if got != kind:
        raise PimError(f"{path} holds a {got} model; this command needs {kind}")
    return model, meta


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    params = {}
    if args.palette_size is not None:
        params["S"] = args.palette_size
    if args.classes is not None:
        if args.kind != "tmpim":
            raise UsageError("--classes applies to --kind tmpim only")
        params["C"] = args.classes
    if args.states is not None:
        if args.kind != "hmm":
            raise UsageError("--states applies to --kind hmm only")
        params["K"] = args.states
    if args.shifts is not None:
        if args.kind != "tmpim":
            raise UsageError("--shifts applies to --kind tmpim only")
        params["max_shift"] = max(args.shifts)
    if args.count is not None:
        params["n_train" if args.kind == "hmm" else "T"] = args.count
    if args.separation is not None:
        params["separation"] = args.separation
    ds = synth_pim_dataset(args.kind, seed=args.seed or 0, **params)
    write_dataset(ds, _out(args))
    return 0


def cmd_train_pim(args, S_default=5):
    files = expand_inputs(args.inputs, IMAGE_SUFFIXES)
    grids = [io.load_image(f) for f in files]
    config = _config(args)
    S = args.palette_size or S_default
    model = fit_pim(grids, S, config)
    out = _out(args)
    io.save_model(out / "model.json", model, config, inputs=[f.name for f in files])
    io.write_trace_csv(out / "trace.csv", model.trace)
    io.save_array_csv(out / "index_map.csv", model.prior.argmax_map())
    log.info("trained on %d signals, F=%.6g", len(grids), model.final_free_energy)
    return 0


def cmd_bgsub_train(args):
    return cmd_train_pim(args, S_default=bgsub.DEFAULT_BACKGROUND_S)


def cmd_infer_pim(args):
    model, _ = _load(args.model, "pim")
    config = _config(args, max_iters=50)
    out = _out(args)
    report = []
    for f in expand_inputs(args.inputs, IMAGE_SUFFIXES):
        grid = io.load_image(f)
        palette, resps, trace = bgsub.infer_test_palette(grid, model.prior, config=config,
                                                         return_trace=True)
        io.save_array_csv(out / f"{f.stem}_index_map.csv", resps.argmax_map())
        report.append({"input": f.name, "free_energy": trace[-1], "iterations": len(trace),
                       "palette_means": palette.means.tolist()})
    _write_json(out / "report.json", {"signals": report})
    return 0


def cmd_bgsub_detect(args):
    model, _ = _load(args.model, "pim")
    config = _config(args, max_iters=50)
    out = _out(args)
    report = []
    for f in expand_inputs(args.inputs, IMAGE_SUFFIXES):
        grid = io.load_image(f)
        res = bgsub.detect(grid, model, threshold_policy=args.threshold_policy, config=config)
        io.save_mask(out / f"{f.stem}_mask.pgm", res.mask)
        io.save_scaled(out / f"{f.stem}_energy.pgm", res.energy_map)
        io.save_array_csv(out / f"{f.stem}_energy.csv", res.energy_map)
        bg = res.expected_background.values
        io.save_image(out / f"{f.stem}_background.{'pgm' if bg.shape[2] == 1 else 'ppm'}",
                      np.clip(bg, 0, 1) if bg.shape[2] in (1, 3) else bg[..., :1])
        report.append({"input": f.name, "threshold": res.threshold,
                       "foreground_fraction": float(res.mask.mean())})
    _write_json(out / "report.json", {"frames": report})
    return 0


def _best_permutation_accuracy(pred, truth):
    from scipy.optimize import linear_sum_assignment

    pred, truth = np.asarray(pred), np.asarray(truth)
    n = max(pred.max(), truth.max()) + 1
    table = np.zeros((n, n))
    np.add.at(table, (pred, truth), 1)
    r, c = linear_sum_assignment(table, maximize=True)
    return float(table[r, c].sum() / len(pred))


def cmd_cluster(args):
    files = expand_inputs(args.inputs, IMAGE_SUFFIXES)
    grids = [io.load_image(f) for f in files]
    config = _config(args)
    I, J = grids[0].height, grids[0].width
    dy, dx = args.shifts if args.shifts is not None else (0, 0)
    tset = TransformSet.shifts(I, J, dy, dx)
    fit = fit_tmpim(grids, args.classes or 2, args.palette_size or 5, tset, config)
    out = _out(args)
    io.save_model(out / "model.json", fit, config, inputs=[f.name for f in files])
    io.write_trace_csv(out / "trace.csv", fit.trace)
    classes = cluster_assignments(fit.posteriors)
    report = {"assignments": [{"input": f.name, "class": int(c),
                               "transform": [p.best_transform(tset).dy, p.best_transform(tset).dx]}
                              for f, c, p in zip(files, classes, fit.posteriors)]}
    truth = None
    if args.truth is not None:
        truth = json.loads(Path(args.truth).read_text())
    elif len(args.inputs) == 1 and Path(args.inputs[0]).is_dir():
        truth = _sidecar(args.inputs[0])
    if truth is not None:
        planted = truth.get("truth", truth).get("classes")
        if planted is None or len(planted) != len(classes):
            raise PimError("truth file has no class list matching the inputs")
        report["accuracy"] = _best_permutation_accuracy(classes, planted)
    _write_json(out / "report.json", report)
    return 0


def cmd_hmm_train(args):
    files = expand_inputs(args.inputs, CSV_SUFFIXES)
    utts = [io.load_spectrogram_csv(f) for f in files]
    config = _config(args)
    fit = fit_pim_hmm(utts, args.states or 4, args.palette_size or DEFAULT_HMM_S, config,
                      topology=args.topology)
    out = _out(args)
    io.save_model(out / "model.json", fit, config, inputs=[f.name for f in files],
                  topology=args.topology)
    io.write_trace_csv(out / "trace.csv", fit.trace)
    return 0


def cmd_hmm_classify(args):
    if not args.model:
        raise UsageError("hmm-classify needs at least one --model")
    models = [_load(m, "pim_hmm")[0].model for m in args.model]
    config = _config(args, max_iters=50)
    out = _out(args)
    rows = []
    for f in expand_inputs(args.inputs, CSV_SUFFIXES):
        best, bounds = classify_utterance(io.load_spectrogram_csv(f), models, config)
        rows.append({"input": f.name, "model": best, "bounds": bounds.tolist()})
    _write_json(out / "report.json", {"models": [str(m) for m in args.model], "utterances": rows})
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--palette-size", type=_positive, metavar="S")
    common.add_argument("--tol", type=float)
    common.add_argument("--max-iters", type=_positive, dest="max_iters")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, metavar="DIR")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pimaps", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help, inputs=True):
        p = sub.add_parser(name, parents=[common], help=help)
        if inputs:
            p.add_argument("inputs", nargs="+", help="input files or directories")
        p.set_defaults(func=func)
        return p

    add("train-pim", cmd_train_pim, "learn a shared index prior from images")
    p = add("infer-pim", cmd_infer_pim, "fit palettes to new images under a trained prior")
    p.add_argument("--model", required=True)
    add("bgsub-train", cmd_bgsub_train, "learn a background model from frames")
    p = add("bgsub-detect", cmd_bgsub_detect, "foreground masks for frames")
    p.add_argument("--model", required=True)
    p.add_argument("--threshold-policy", type=_policy, default="mad",
                   help="mad, mad:<k> or fixed:<v> (default: mad)")
    p = add("cluster", cmd_cluster, "cluster images with a transformed mixture")
    p.add_argument("--classes", type=_positive, metavar="C")
    p.add_argument("--shifts", type=_shifts, metavar="DY_MAX,DX_MAX")
    p.add_argument("--truth", help="planted truth JSON to score against")
    p = add("hmm-train", cmd_hmm_train, "train one word model from spectrogram CSVs")
    p.add_argument("--states", type=_positive, metavar="K")
    p.add_argument("--topology", choices=TOPOLOGIES, default="left-right")
    p = add("hmm-classify", cmd_hmm_classify, "classify spectrogram CSVs against word models")
    p.add_argument("--model", action="append", default=[])
    p = add("synth", cmd_synth, "write a planted synthetic dataset", inputs=False)
    p.add_argument("--kind", required=True, choices=("pim", "tmpim", "bgsub", "hmm"))
    p.add_argument("--classes", type=_positive, metavar="C")
    p.add_argument("--states", type=_positive, metavar="K")
    p.add_argument("--shifts", type=_shifts, metavar="DY_MAX,DX_MAX")
    p.add_argument("--count", type=_positive, help="number of (training) signals")
    p.add_argument("--separation", type=float)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pimaps {args.command}: {exc}", file=sys.stderr)
        return 2
    except (PimError, OSError, ValueError) as exc:
        print(f"pimaps {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
