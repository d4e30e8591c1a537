"""Command-line entry point: ``sada <subcommand> ...``.

Exit codes: 0 success, 2 usage or validation error, 3 I/O error,
4 numerical failure. Every JSON output carries a ``"version"`` field and
every file is written atomically, so a failed run leaves no partial output.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import jsonschema
import numpy as np

from ._io import FORMAT_VERSION, atomic_write_bytes, atomic_write_text, dump_json
from .augmentation import generate_batch_transforms
from .imaging import PpmError, RgbImage, encode_ppm, load_ppm, to_optical_density
from .losses import (
    LossResult,
    cross_entropy,
    disc_loss,
    finite_diff_check,
    local_align_loss,
    rep_loss,
    softmax,
)
from .metrics import confusion_matrix, f1_scores
from .stain_separation import SnmfConfig, fit_snmf, matrix_to_csv, reconstruct
from .synth import default_domains, synth_dataset
from .toy_train import loo_experiment, toy_config, toy_erm_config

__all__ = ["main", "EXIT_OK", "EXIT_USAGE", "EXIT_IO", "EXIT_NUMERIC"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

GRAD_TOLERANCE = 1e-4

logger = logging.getLogger("sada")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _usage(message):
    return CliError(EXIT_USAGE, message)


def _numeric(message):
    return CliError(EXIT_NUMERIC, message)


# --------------------------------------------------------------------- helpers

def _snmf_config(args):
    try:
        return SnmfConfig(n_stains=args.stains, lam=args.lam, max_iters=args.iters,
                          tol=args.tol, seed=args.seed)
    except ValueError as exc:
        raise _usage(str(exc)) from exc


def _read_image(path):
    if not os.path.isfile(path):
        raise _usage(f"input image not found: {path}")
    try:
        return load_ppm(path)
    except PpmError as exc:
        raise _usage(f"{path}: {exc}") from exc


def _prepare_out_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise CliError(EXIT_IO, f"output directory is not writable: {path}")


def _require_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise _numeric(f"non-finite values in {name}")


def _write_all(files):
    """Render everything first, then write each file atomically."""
    for path, payload in files:
        data = payload.encode("utf-8") if isinstance(payload, str) else payload
        atomic_write_bytes(path, data)


def _curve_csv(curve):
    return "step,value\n" + "".join(f"{i},{v:.9g}\n" for i, v in enumerate(curve))


def _emit(args, payload):
    text = dump_json(payload)
    if getattr(args, "out", None):
        _prepare_out_dir(os.path.dirname(os.path.abspath(args.out)))
        atomic_write_text(args.out, text)
    sys.stdout.write(text)


# ------------------------------------------------------------------ decompose

def cmd_decompose(args):
    img = _read_image(args.image)
    cfg = _snmf_config(args)
    _prepare_out_dir(args.out)
    od = to_optical_density(img)
    try:
        dec = fit_snmf(od, cfg)
    except ValueError as exc:
        raise _numeric(f"decomposition failed: {exc}") from exc
    _require_finite("stain basis", dec.basis)
    _require_finite("density maps", dec.density)

    recon_od = reconstruct(dec)
    recon = np.clip(np.floor(255.0 * np.exp(-recon_od) + 0.5), 0, 255).astype(np.uint8)
    recon_px = recon.T.reshape(img.height, img.width, 3)
    diff = recon_px.astype(np.float64) - img.pixels
    stats = {
        "version": FORMAT_VERSION,
        "width": img.width,
        "height": img.height,
        "n_stains": cfg.n_stains,
        "lambda": cfg.lam,
        "seed": cfg.seed,
        "rmse": float(np.sqrt(np.mean((od - dec.basis @ dec.density) ** 2))),
        "rmse_intensity": float(np.sqrt(np.mean(diff**2))),
        "objective_final": float(dec.objective_trace[-1]),
        "objective_trace_length": int(len(dec.objective_trace)),
        "density_trace_length": int(len(dec.density_trace)),
    }
    _write_all([
        (os.path.join(args.out, "W.csv"), matrix_to_csv(dec.basis)),
        (os.path.join(args.out, "H.csv"), matrix_to_csv(dec.density)),
        (os.path.join(args.out, "reconstruction.ppm"), encode_ppm(RgbImage(recon_px))),
        (os.path.join(args.out, "stats.json"), dump_json(stats)),
    ])
    sys.stdout.write(dump_json(stats))
    return EXIT_OK


# -------------------------------------------------------------------- augment

def cmd_augment(args):
    if not os.path.isdir(args.batch_dir):
        raise _usage(f"batch directory not found: {args.batch_dir}")
    names = sorted(n for n in os.listdir(args.batch_dir) if n.lower().endswith(".ppm"))
    if args.k < 2:
        raise _usage("--k must be at least 2")
    if len(names) < args.k:
        raise _usage(f"need at least k={args.k} images, found {len(names)}")
    cfg = _snmf_config(args)
    images = [_read_image(os.path.join(args.batch_dir, n)) for n in names]
    if len({im.pixels.shape for im in images}) != 1:
        raise _usage("all images in the batch must share dimensions")
    _prepare_out_dir(args.out)
    try:
        model, samples = generate_batch_transforms(images, args.k, cfg, args.seed)
    except ValueError as exc:
        raise _numeric(f"augmentation failed: {exc}") from exc

    files, entries = [], []
    for row in samples:
        for s in row:
            out_name = f"aug_{s.source_index}_{s.donor_cluster}.ppm"
            files.append((os.path.join(args.out, out_name), encode_ppm(s.image)))
            entries.append({
                "output": out_name,
                "source_index": s.source_index,
                "source_file": names[s.source_index],
                "source_cluster": s.source_cluster,
                "donor_index": s.target_index,
                "donor_file": names[s.target_index],
                "donor_cluster": s.donor_cluster,
            })
    manifest = {
        "version": FORMAT_VERSION,
        "seed": args.seed,
        "k": args.k,
        "n_stains": cfg.n_stains,
        "inputs": names,
        "clusters": [int(c) for c in model.labels],
        "entries": entries,
    }
    files.append((os.path.join(args.out, "manifest.json"), dump_json(manifest)))
    _write_all(files)
    print(f"wrote {len(entries)} augmented images to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ train-toy

_TRAIN_PROPS = {
    "steps": {"type": "integer", "minimum": 0},
    "batch_size": {"type": "integer", "minimum": 1},
    "learning_rate": {"type": "number", "minimum": 0},
    "classifier_learning_rate": {"type": ["number", "null"], "minimum": 0},
    "k": {"type": "integer", "minimum": 2},
    "beta": {"type": "number", "minimum": 0},
    "tau": {"type": "number", "exclusiveMinimum": 0},
    "grid": {"type": "integer", "minimum": 1},
    "feature_dim": {"type": "integer", "minimum": 1},
    "embed_dim": {"type": "integer", "minimum": 1},
    "local_dim": {"type": "integer", "minimum": 1},
    "include_transformed": {"type": "boolean"},
    "freeze_backbone": {"type": "boolean"},
    "per_domain_batches": {"type": "boolean"},
    "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "snmf": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "n_stains": {"type": "integer", "minimum": 1, "maximum": 3},
            "lam": {"type": "number", "minimum": 0},
            "max_iters": {"type": "integer", "minimum": 1},
            "tol": {"type": "number", "exclusiveMinimum": 0},
            "seed": {"type": "integer"},
            "od_mask_threshold": {"type": "number", "minimum": 0},
        },
    },
}

TRAIN_TOY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "version": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_per_class": {"type": "integer", "minimum": 1},
                "class_ratios": {"type": "array", "minItems": 2,
                                 "items": {"type": "number", "exclusiveMinimum": 0}},
                "image_size": {"type": "integer", "minimum": 8},
                "test_fraction": {"type": "number", "exclusiveMinimum": 0,
                                  "exclusiveMaximum": 1},
            },
        },
        "sada": {"type": "object", "additionalProperties": False, "properties": _TRAIN_PROPS},
        "erm": {"type": "object", "additionalProperties": False, "properties": _TRAIN_PROPS},
    },
}

DEFAULT_DATA = {"n_per_class": 30, "class_ratios": [4, 3, 2, 1, 1], "image_size": 32,
                "test_fraction": 0.2}


def _field_path(error):
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "additionalProperties":
        # name the offending key rather than its parent object
        extra = sorted(set(error.instance) - set(error.schema.get("properties", {})))
        parts.extend(extra[:1])
    return ".".join(parts) or "<root>"


def validate_train_config(doc):
    """Check a train-toy config; raises ``CliError`` naming the bad field."""
    validator = jsonschema.Draft7Validator(TRAIN_TOY_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise _usage(f"config field {_field_path(err)}: {err.message}")


def _build_cfg(factory, overrides, seed, where):
    overrides = dict(overrides)
    if "snmf" in overrides:
        try:
            overrides["snmf"] = SnmfConfig(**overrides["snmf"])
        except ValueError as exc:
            raise _usage(f"config field {where}.snmf: {exc}") from exc
    try:
        return factory(**{**overrides, "seed": seed})
    except ValueError as exc:
        raise _usage(f"config field {where}: {exc}") from exc


def cmd_train_toy(args):
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError as exc:
        raise _usage(f"config not found: {args.config}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {args.config}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise _usage(f"config is not valid JSON: {exc}") from exc
    validate_train_config(doc)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    data = {**DEFAULT_DATA, **doc.get("data", {})}
    sada_cfg = _build_cfg(toy_config, doc.get("sada", {}), seed, "sada")
    erm_cfg = _build_cfg(toy_erm_config, doc.get("erm", {}), seed, "erm")
    if data["image_size"] % sada_cfg.grid or data["image_size"] % erm_cfg.grid:
        raise _usage("config field data.image_size: must be divisible by the patch grid")
    _prepare_out_dir(args.out)

    domains = synth_dataset(default_domains(), data["n_per_class"], data["class_ratios"],
                            seed=seed, image_size=data["image_size"])
    try:
        folds = loo_experiment(domains, sada_cfg, erm_cfg, data["test_fraction"])
    except FloatingPointError as exc:
        raise _numeric(str(exc)) from exc

    files, fold_docs = [], []
    for fold in folds:
        d = fold["held_out"]
        fold_docs.append({"held_out": d, "sada": fold["sada"].to_dict(),
                          "erm": fold["erm"].to_dict()})
        curves = {
            f"curve_sada_stage1_domain{d}.csv": fold["sada"].stage1_curve,
            f"curve_sada_stage2_domain{d}.csv": fold["sada"].stage2_curve,
            f"curve_erm_domain{d}.csv": fold["erm"].stage1_curve,
        }
        files.extend((os.path.join(args.out, n), _curve_csv(c)) for n, c in curves.items())
    summary = {
        "sada_mean_f1_macro": float(np.mean([f["sada"].f1_macro for f in folds])),
        "erm_mean_f1_macro": float(np.mean([f["erm"].f1_macro for f in folds])),
        "sada_mean_f1_micro": float(np.mean([f["sada"].f1_micro for f in folds])),
        "erm_mean_f1_micro": float(np.mean([f["erm"].f1_micro for f in folds])),
        "sada_min_in_domain_f1_micro": float(min(f["sada"].in_domain_f1_micro for f in folds)),
    }
    report = {
        "version": FORMAT_VERSION,
        "seed": seed,
        "data": data,
        "sada_config": sada_cfg.to_dict(),
        "erm_config": erm_cfg.to_dict(),
        "folds": fold_docs,
        "summary": summary,
    }
    files.append((os.path.join(args.out, "report.json"), dump_json(report)))
    _write_all(files)
    sys.stdout.write(dump_json({"version": FORMAT_VERSION, **summary}))
    return EXIT_OK


# ----------------------------------------------------------------- grad-check

def _grad_problems(rng):
    """Seeded inputs for each loss; embeddings are unit vectors, far from zero norm."""
    n, k, c, d, positions = 6, 3, 3, 5, 4
    y = np.arange(n) % c

    def unit(a):
        return a / np.linalg.norm(a, axis=-1, keepdims=True)

    z = unit(rng.normal(size=(n, d)))
    z_t = unit(rng.normal(size=(n, k - 1, d)))
    E = rng.normal(size=(n, positions, d))
    E_t = rng.normal(size=(n, k - 1, positions, d))
    logits = rng.normal(size=(n, c))

    def ce_softmax(logits):
        probs = softmax(logits)
        res = cross_entropy(probs, y)
        g = res.gradients["probs"]
        # chain through the softmax Jacobian: p * (g - <p, g>)
        return LossResult(res.value, {"logits": probs * (g - np.sum(probs * g, axis=1,
                                                                      keepdims=True))})

    def rep(z, z_t, E, E_t):
        disc = disc_loss(z, z_t, y, include_transformed=True)
        return rep_loss(disc, local_align_loss(E, E_t, k), 0.1)

    return {
        "local_align_loss": (lambda E, E_t: local_align_loss(E, E_t, k), {"E": E, "E_t": E_t}),
        "disc_loss": (lambda z, z_t: disc_loss(z, z_t, y), {"z": z, "z_t": z_t}),
        "disc_loss_full_denominator": (
            lambda z, z_t: disc_loss(z, z_t, y, include_transformed=True),
            {"z": z, "z_t": z_t}),
        "cross_entropy_softmax": (ce_softmax, {"logits": logits}),
        "rep_loss": (rep, {"z": z, "z_t": z_t, "E": E, "E_t": E_t}),
    }


GRAD_LOSSES = ("local_align_loss", "disc_loss", "disc_loss_full_denominator",
               "cross_entropy_softmax", "rep_loss")


def run_grad_checks(seed=0, n_coords=200, losses=GRAD_LOSSES):
    problems = _grad_problems(np.random.default_rng(seed))
    out = []
    for name in losses:
        fn, inputs = problems[name]
        err = finite_diff_check(fn, inputs, n_coords=n_coords, seed=seed)
        out.append({"loss_name": name, "max_rel_err": float(err), "n_coords": n_coords,
                    "seed": seed, "passed": bool(err < GRAD_TOLERANCE)})
    return out


def cmd_grad_check(args):
    if args.n_coords < 1:
        raise _usage("--n-coords must be positive")
    losses = GRAD_LOSSES if args.loss == "all" else (args.loss,)
    results = run_grad_checks(args.seed, args.n_coords, losses)
    payload = {"version": FORMAT_VERSION, "tolerance": GRAD_TOLERANCE, "results": results}
    _emit(args, payload)
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_NUMERIC


# ----------------------------------------------------------------------- eval

def read_label_csv(path):
    """Integer labels from the last column of each row; a non-numeric first row is a header."""
    if not os.path.isfile(path):
        raise _usage(f"label file not found: {path}")
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = [r for r in csv.reader(io.StringIO(fh.read())) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from exc
    labels = []
    for i, row in enumerate(rows):
        cell = row[-1].strip()
        try:
            labels.append(int(cell))
        except ValueError:
            if i == 0:
                continue
            raise _usage(f"{path} line {i + 1}: label {cell!r} is not an integer") from None
    if any(v < 0 for v in labels):
        raise _usage(f"{path}: labels must be non-negative")
    return np.asarray(labels, dtype=np.int64)


def cmd_eval(args):
    pred = read_label_csv(args.pred)
    truth = read_label_csv(args.truth)
    if len(pred) != len(truth):
        raise _usage(f"length mismatch: {len(pred)} predictions vs {len(truth)} labels")
    if len(truth) == 0:
        raise _usage("no labels to evaluate")
    n_classes = args.n_classes or int(max(pred.max(), truth.max())) + 1
    if max(pred.max(), truth.max()) >= n_classes:
        raise _usage(f"labels exceed --n-classes {n_classes}")
    cm = confusion_matrix(truth, pred, n_classes)
    micro, macro, per_class = f1_scores(cm)
    payload = {
        "version": FORMAT_VERSION,
        "n": int(len(truth)),
        "f1_micro": micro,
        "f1_macro": macro,
        "per_class": [float(v) for v in per_class],
        "confusion": cm.tolist(),
    }
    _emit(args, payload)
    return EXIT_OK


# ---------------------------------------------------------------------- parser

def _add_snmf_flags(p):
    p.add_argument("--stains", type=int, default=2, help="number of stains r (1..3)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1, help="L1 weight on densities")
    p.add_argument("--iters", type=int, default=200, help="maximum SNMF iterations")
    p.add_argument("--tol", type=float, default=1e-6, help="relative objective tolerance")


def build_parser():
    parser = argparse.ArgumentParser(prog="sada", description="Stain-aware augmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="factor one PPM image into stain basis and densities")
    p.add_argument("image")
    _add_snmf_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("augment", help="restain a directory of PPM images")
    p.add_argument("batch_dir")
    p.add_argument("--k", type=int, default=3, help="number of stain clusters")
    _add_snmf_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-toy", help="leave-one-domain-out run on synthetic data")
    p.add_argument("config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("grad-check", help="finite-difference checks of every loss gradient")
    p.add_argument("--loss", choices=("all",) + GRAD_LOSSES, default="all")
    p.add_argument("--n-coords", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write the report to this file")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("eval", help="F1 scores from prediction and truth label files")
    p.add_argument("pred")
    p.add_argument("truth")
    p.add_argument("--n-classes", type=int, default=None)
    p.add_argument("--out", default=None, help="also write the metrics to this file")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
