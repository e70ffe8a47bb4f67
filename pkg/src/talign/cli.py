"""Command-line entry point: ``talign {gen-data,train,eval,infer,export}``.

Failures print a single JSON line ``{"error": <kind>, "message": ...}`` on stderr and
exit with the code registered for that kind in ``EXIT_CODES``.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import dataset as ds
from . import geometry as geo
from . import prn as prn_mod
from .errors import CheckpointError, FormatError, NumericError, TAlignError
from .inference import evaluate, predict
from .losses import LossWeights
from .training import TrainConfig, train_staged

log = logging.getLogger("talign")

EXIT_CODES = {
    "usage": 2,
    "missing-file": 3,
    "schema": 4,
    "checkpoint": 5,
    "format": 6,
    "numeric": 7,
    "invalid-argument": 8,
}

SEED_ENV = "TALIGN_SEED"
PRN_CKPT = "prn.ckpt"

_DEFAULT = TrainConfig()


def _obj(properties):
    return {"type": "object", "additionalProperties": False, "properties": properties}


def _int(minimum=None, default=None):
    out = {"type": "integer"}
    if minimum is not None:
        out["minimum"] = minimum
    if default is not None:
        out["default"] = default
    return out


def _num(default, **bounds):
    return {"type": "number", "default": default, **bounds}


def _widths(default):
    return {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1, "default": list(default)}


RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "talign RunConfig",
    **_obj(
        {
            "seed": _int(0),
            "epochs_stage1": _int(1, _DEFAULT.epochs_stage1),
            "epochs_stage2": _int(1, _DEFAULT.epochs_stage2),
            "batch_size": _int(1, _DEFAULT.batch_size),
            "lr_prn": _num(_DEFAULT.lr_prn, exclusiveMinimum=0),
            "lr_dtmd": _num(_DEFAULT.lr_dtmd, exclusiveMinimum=0),
            "val_every": _int(1, _DEFAULT.val_every),
            "weights": _obj(
                {
                    "centroid": _num(_DEFAULT.weights.centroid, minimum=0),
                    "denoise": _num(_DEFAULT.weights.denoise, minimum=0),
                    "diffusion": _num(_DEFAULT.weights.diffusion, minimum=0),
                }
            ),
            "augment": _obj(
                {
                    "probability": _num(_DEFAULT.augment_prob, minimum=0, maximum=1),
                    "k_min": {**_int(1, _DEFAULT.augment.k_min), "maximum": ds.N_TEETH},
                    "k_max": {**_int(1, _DEFAULT.augment.k_max), "maximum": ds.N_TEETH},
                    "max_angle_deg": _num(float(np.rad2deg(_DEFAULT.augment.max_angle)), minimum=0),
                    "max_shift": _num(_DEFAULT.augment.max_shift, minimum=0),
                }
            ),
            "schedule": _obj(
                {
                    "steps": _int(1, _DEFAULT.schedule_steps),
                    "beta_min": _num(_DEFAULT.beta_min, exclusiveMinimum=0, exclusiveMaximum=1),
                    "beta_max": _num(_DEFAULT.beta_max, exclusiveMinimum=0, exclusiveMaximum=1),
                }
            ),
            "model": _obj(
                {
                    "encoder_channels": _widths(_DEFAULT.encoder_channels),
                    "decoder_channels": _widths(_DEFAULT.decoder_channels),
                    "estimator_hidden": _widths(_DEFAULT.estimator_hidden),
                    "time_dim": {**_int(2, _DEFAULT.time_dim), "multipleOf": 2},
                }
            ),
            "paths": _obj({"data": {"type": "string"}, "out": {"type": "string"}}),
        }
    ),
}


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


def validate_run_config(doc):
    """Schema check plus the cross-field rules a schema cannot express."""
    try:
        jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA).validate(doc)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError("schema", f"{where}: {exc.message}") from exc
    aug, sch, model = doc.get("augment", {}), doc.get("schedule", {}), doc.get("model", {})
    if aug.get("k_min", _DEFAULT.augment.k_min) > aug.get("k_max", _DEFAULT.augment.k_max):
        raise CliError("schema", "augment: k_min must not exceed k_max")
    if sch.get("beta_min", _DEFAULT.beta_min) > sch.get("beta_max", _DEFAULT.beta_max):
        raise CliError("schema", "schedule: beta_min must not exceed beta_max")
    if model.get("decoder_channels", _DEFAULT.decoder_channels)[-1] != 16:
        raise CliError("schema", "model/decoder_channels: final width must be 16")
    return doc


def train_config_from(doc, seed):
    w, aug, sch, model = (doc.get(k, {}) for k in ("weights", "augment", "schedule", "model"))
    d = _DEFAULT
    return TrainConfig(
        epochs_stage1=doc.get("epochs_stage1", d.epochs_stage1),
        epochs_stage2=doc.get("epochs_stage2", d.epochs_stage2),
        batch_size=doc.get("batch_size", d.batch_size),
        lr_prn=doc.get("lr_prn", d.lr_prn),
        lr_dtmd=doc.get("lr_dtmd", d.lr_dtmd),
        weights=LossWeights(
            w.get("centroid", d.weights.centroid), w.get("denoise", d.weights.denoise), w.get("diffusion", d.weights.diffusion)
        ),
        seed=seed,
        augment_prob=aug.get("probability", d.augment_prob),
        augment=ds.AugmentConfig(
            aug.get("k_min", d.augment.k_min),
            aug.get("k_max", d.augment.k_max),
            float(np.deg2rad(aug["max_angle_deg"])) if "max_angle_deg" in aug else d.augment.max_angle,
            aug.get("max_shift", d.augment.max_shift),
        ),
        val_every=doc.get("val_every", d.val_every),
        schedule_steps=sch.get("steps", d.schedule_steps),
        beta_min=sch.get("beta_min", d.beta_min),
        beta_max=sch.get("beta_max", d.beta_max),
        encoder_channels=list(model.get("encoder_channels", d.encoder_channels)),
        decoder_channels=list(model.get("decoder_channels", d.decoder_channels)),
        estimator_hidden=list(model.get("estimator_hidden", d.estimator_hidden)),
        time_dim=model.get("time_dim", d.time_dim),
    )


def resolve_seed(flag, config_seed=None):
    """--seed flag, then the config file, then $TALIGN_SEED, then 0."""
    if flag is not None:
        return flag
    if config_seed is not None:
        return config_seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError("invalid-argument", f"{SEED_ENV} must be an integer, got {env!r}") from None


def _existing(path, what):
    path = Path(path)
    if not path.exists():
        raise CliError("missing-file", f"{what} not found: {path}")
    return path


def _load_json(path, what):
    try:
        return json.loads(_existing(path, what).read_text())
    except json.JSONDecodeError as exc:
        raise CliError("schema", f"{path}: not valid JSON ({exc})") from exc


def _prn_checkpoint(path):
    path = _existing(path, "checkpoint")
    if path.is_dir():
        path = _existing(path / PRN_CKPT, "checkpoint")
    model, _ = prn_mod.load_prn(path)
    return model


def _dataset_dir(path):
    path = _existing(path, "dataset directory")
    _existing(path / ds.MANIFEST, "dataset manifest")
    return path


def _emit(payload, out=None):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# commands -------------------------------------------------------------------


def cmd_gen_data(args):
    seed = resolve_seed(args.seed)
    gen = ds.GeneratorConfig()
    if args.perturb_angle is not None:
        gen = replace(gen, perturb_angle=float(np.deg2rad(args.perturb_angle)))
    if args.perturb_shift is not None:
        gen = replace(gen, perturb_shift=args.perturb_shift)
    if args.count < 1:
        raise CliError("invalid-argument", f"--count must be positive, got {args.count}")
    if gen.perturb_angle < 0 or gen.perturb_shift < 0:
        raise CliError("invalid-argument", "perturbation magnitudes must be non-negative")
    samples = ds.generate_synthetic(args.count, seed=seed, config=gen)
    manifest = ds.save_dataset(args.out, samples, ds.SplitSpec(), seed=seed)
    _emit({"out": str(args.out), "count": len(samples), "seed": seed,
           "splits": {name: len(manifest.ids(name)) for name in ds.SPLIT_NAMES}})
    return 0


def cmd_train(args):
    doc = validate_run_config(_load_json(args.config, "config")) if args.config else {}
    paths = doc.get("paths", {})
    data = args.data or paths.get("data")
    out = args.out or paths.get("out")
    if not data or not out:
        raise CliError("invalid-argument", "both a dataset (--data) and an output directory (--out) are required")
    cfg = train_config_from(doc, resolve_seed(args.seed, doc.get("seed")))
    data = _dataset_dir(data)
    train_set, val_set = ds.load_split(data, "train"), ds.load_split(data, "val")
    if not train_set or not val_set:
        raise CliError("invalid-argument", f"{data}: train and val splits must both be non-empty")
    arts = train_staged(train_set, val_set, cfg, out)
    resolved = {**doc, "seed": cfg.seed, "paths": {"data": str(data), "out": str(out)}}
    (Path(out) / "run_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    _emit({"out": str(out), "epochs": len(arts.trace), "final_val": arts.val_history[-1]})
    return 0


def cmd_eval(args):
    model = _prn_checkpoint(args.checkpoint)
    samples = ds.load_split(_dataset_dir(args.data), args.split)
    if not samples:
        raise CliError("invalid-argument", f"split {args.split!r} is empty")
    report = evaluate(model, samples, args.batch_size)
    payload = {"split": args.split, "count": len(report), **json.loads(report.to_json())}
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    _emit(payload, args.json)
    return 0


def cmd_infer(args):
    model = _prn_checkpoint(args.checkpoint)
    sample = ds.read_sample(_existing(args.input, "input sample"))
    pred = predict(model, [sample])[0]
    aligned = geo.apply_transform(pred, sample.input.points)
    aligned[~sample.validity] = 0.0
    out = ds.Sample(ds.Dentition(aligned, sample.validity), pred, sample.id)
    ds.write_sample(args.out, out)
    return 0


def export_ply(points, validity):
    m, p, _ = points.shape
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {m * p}",
        "property float x",
        "property float y",
        "property float z",
        "property int tooth",
        "property uchar valid",
        "end_header",
    ]
    for i in range(m):
        flag = int(validity[i])
        for x, y, z in points[i]:
            lines.append(f"{x:.9g} {y:.9g} {z:.9g} {i} {flag}")
    return "\n".join(lines) + "\n"


CSV_COLUMNS = (
    ["tooth", "valid"]
    + [f"m{r}{c}" for r in range(4) for c in range(4)]
    + ["euler_x", "euler_y", "euler_z", "tx", "ty", "tz"]
)


def export_csv(transforms, validity):
    rows = [CSV_COLUMNS]
    angles = geo.rotation_to_euler(transforms[:, :3, :3])
    for i, t in enumerate(transforms):
        rows.append([i, int(validity[i])] + [repr(float(v)) for v in t.reshape(16)]
                    + [repr(float(a)) for a in angles[i]] + [repr(float(v)) for v in t[:3, 3]])
    return rows


def cmd_export(args):
    sample = ds.read_sample(_existing(args.input, "input sample"))
    transforms = sample.target
    if args.transforms:
        transforms = ds.read_sample(_existing(args.transforms, "transforms file")).target
        if transforms.shape != sample.target.shape:
            raise CliError("format", f"transform set {transforms.shape} does not match sample {sample.target.shape}")
    if args.format == "ply":
        points = sample.input.points
        if args.transforms:
            points = geo.apply_transform(transforms, points)
            points[~sample.validity] = 0.0
        Path(args.out).write_text(export_ply(points, sample.validity))
    else:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(export_csv(transforms, sample.validity))
    return 0


# argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def build_parser():
    parser = _Parser(prog="talign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--perturb-angle", type=float, help="max per-axis perturbation angle, degrees")
    p.add_argument("--perturb-shift", type=float, help="max per-coordinate perturbation shift")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run staged training")
    p.add_argument("--data")
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="prn.ckpt or a training output directory")
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--batch-size", type=int, default=_DEFAULT.batch_size)
    p.add_argument("--json", help="write the JSON report here instead of stdout")
    p.add_argument("--csv", help="also write per-sample rows as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="align one sample")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export", help="write a sample as PLY points or CSV transforms")
    p.add_argument("--input", required=True)
    p.add_argument("--transforms", help="TALD file whose transform set replaces the input's")
    p.add_argument("--format", choices=("ply", "csv"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def _classify(exc):
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, NotADirectoryError)):
        return "missing-file"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, FormatError):
        return "format"
    if isinstance(exc, NumericError):
        return "numeric"
    if isinstance(exc, TAlignError):
        return "invalid-argument"
    return None


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except Exception as exc:
        kind = _classify(exc)
        if kind is None:
            raise
        message = " ".join(str(exc).split())
        sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
        return EXIT_CODES[kind]
