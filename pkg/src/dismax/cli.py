"""Command line entry point: ``dismax train|calibrate|evaluate|report|synth``.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format
error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import pipeline
from .data import Dataset, synth_blobs, synth_ood
from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError
from .evaluation import render_table
from .model import Checkpoint, atomic_write_text
from .scoring import SCORE_KINDS, ScoreDump

logger = logging.getLogger("dismax")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CACHE_ENV = "DISMAX_CACHE_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def cache_dir() -> str:
    return os.environ.get(CACHE_ENV) or os.path.join(os.path.expanduser("~"), ".cache", "dismax")


def data_ref(text: str):
    """``cache.json`` or ``images[,labels]`` (IDX, optionally gzipped) -> dataset reference."""
    if text.endswith(".json") and "," not in text:
        return os.path.abspath(text)
    parts = text.split(",")
    if len(parts) > 2 or not parts[0]:
        raise UsageError(f"bad dataset reference {text!r}; use FILE.json or IMAGES[,LABELS]")
    ref = {"images": os.path.abspath(parts[0])}
    if len(parts) == 2 and parts[1]:
        ref["labels"] = os.path.abspath(parts[1])
    return ref


def load_ref(text: str, name: str = "") -> Dataset:
    ref = data_ref(text)
    if isinstance(ref, dict) and name:
        ref["name"] = name
    ds = pipeline.resolve_dataset(ref)
    if name:
        ds.name = name
    return ds


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: str, command: str, argv: list[str], inputs: list[str], outputs: list[str],
                   config_hash: str | None = None, seed: int | None = None) -> str:
    path = f"{out}.manifest.json"
    manifest = {
        "command": command,
        "argv": argv,
        "config_hash": config_hash,
        "seed": seed,
        "inputs": {p: _sha256(p) for p in inputs if os.path.isfile(p)},
        "outputs": {p: _sha256(p) for p in outputs if os.path.isfile(p)},
    }
    atomic_write_text(path, json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def _ref_paths(ref) -> list[str]:
    if isinstance(ref, str):
        return [ref]
    if isinstance(ref, dict):
        return [ref[k] for k in ("images", "labels") if k in ref]
    return []


# -- commands ----------------------------------------------------------------

CONFIG_FLAGS = {
    "loss": str, "epochs": int, "batch_size": int, "lr": float, "momentum": float,
    "weight_decay": float, "lr_decay_factor": float, "entropic_scale": float, "alpha": float,
    "seed": int, "num_classes": int, "val_fraction": float,
}


def build_config(args) -> pipeline.TrainConfig:
    obj = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
        if not isinstance(obj, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
    if args.preset:
        obj["preset"] = args.preset
    for name in CONFIG_FLAGS:
        value = getattr(args, name)
        if value is not None:
            obj[name] = value
    if args.layer_dims:
        obj["layer_dims"] = [int(d) for d in args.layer_dims.split(",")]
    if args.lr_decay_epochs is not None:
        obj["lr_decay_epochs"] = [int(d) for d in args.lr_decay_epochs.split(",") if d]
    if args.data:
        obj["train_data"] = data_ref(args.data)
    if args.no_nesterov:
        obj["nesterov"] = False
    config = pipeline.TrainConfig.from_dict(obj)
    if config.train_data is None:
        raise ConfigError("no training data: pass --data or set train_data in the config")
    config.validate()
    return config


def cmd_train(args) -> int:
    config = build_config(args)
    data = pipeline.resolve_dataset(config.train_data)
    ckpt = pipeline.train(config, data)
    ckpt.save(args.out)
    final = ckpt.metadata["history"][-1] if ckpt.metadata["history"] else None
    if final:
        print(f"trained {config.loss}: {config.epochs} epochs, final loss {final['loss']:.4f} "
              f"acc {final['acc']:.4f} -> {args.out}")
    else:
        print(f"wrote untrained checkpoint -> {args.out}")
    write_manifest(args.out, "train", args.argv, _ref_paths(config.train_data), [args.out],
                   config.config_hash(), config.seed)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    if args.val:
        val = load_ref(args.val)
        inputs = _ref_paths(data_ref(args.val))
    else:
        ref = ckpt.metadata.get("config", {}).get("train_data")
        if ref is None:
            raise ConfigError("checkpoint does not record its training data; pass --val")
        val = pipeline.validation_split(ckpt, pipeline.resolve_dataset(ref))
        inputs = _ref_paths(ref)
    out = args.out or args.checkpoint
    calibrated = pipeline.calibrate(ckpt, val, args.bins)
    calibrated.save(out)
    print(calibrated.calibration.summary())
    write_manifest(out, "calibrate", args.argv, [args.checkpoint] + inputs, [out],
                   ckpt.metadata.get("config_hash"), ckpt.metadata.get("seed"))
    return EXIT_OK


def _parse_ood(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        name, sep, ref = item.partition("=")
        if not sep or not name or not ref:
            raise UsageError(f"bad --ood value {item!r}; use NAME=IMAGES or NAME=FILE.json")
        if name in out:
            raise UsageError(f"duplicate OOD set name {name!r}")
        out[name] = ref
    return out


def _parse_kinds(text: str) -> list[str]:
    kinds = [k.strip().lower() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in SCORE_KINDS]
    if bad or not kinds:
        raise UsageError(f"score kinds must come from {','.join(SCORE_KINDS)}, got {text!r}")
    return kinds


def cmd_evaluate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    id_test = load_ref(args.id, "ID")
    ood_refs = _parse_ood(args.ood)
    ood_sets = {name: load_ref(ref, name).unlabeled() for name, ref in ood_refs.items()}
    kinds = _parse_kinds(args.scores)
    label = args.label or os.path.splitext(os.path.basename(args.checkpoint))[0]
    reports, dump = pipeline.evaluate(ckpt, id_test, ood_sets, kinds, not args.no_ece, label)
    atomic_write_text(args.dump, dump.to_csv())
    rows = [reports[k] for k in kinds]
    print(render_table(rows), end="")
    outputs = [args.dump]
    if args.json:
        atomic_write_text(args.json, json.dumps([r.to_dict() for r in rows], indent=1, sort_keys=True) + "\n")
        outputs.append(args.json)
    inputs = [args.checkpoint] + _ref_paths(data_ref(args.id))
    for ref in ood_refs.values():
        inputs += _ref_paths(data_ref(ref))
    write_manifest(args.dump, "evaluate", args.argv, inputs, outputs,
                   ckpt.metadata.get("config_hash"), ckpt.metadata.get("seed"))
    return EXIT_OK


def _parse_dump_entry(entry: str) -> tuple[str, str, list[str]]:
    """``PATH[:mps,mds]`` -> (path, label, kinds)."""
    path, kinds = entry, list(SCORE_KINDS)
    head, sep, tail = entry.rpartition(":")
    if sep and head and not os.path.exists(entry) and all(k in SCORE_KINDS for k in tail.split(",")):
        path, kinds = head, _parse_kinds(tail)
    label = os.path.splitext(os.path.basename(path))[0]
    return path, label, kinds


def cmd_report(args) -> int:
    entries = [_parse_dump_entry(e) for e in args.dumps]
    dumps = [(label, ScoreDump.read(path), kinds) for path, label, kinds in entries]
    rows = pipeline.report(dumps)
    text = render_table(rows)
    print(text, end="")
    payload = json.dumps([r.to_dict() for r in rows], indent=1, sort_keys=True) + "\n"
    if args.json:
        atomic_write_text(args.json, payload)
        write_manifest(args.json, "report", args.argv, [p for p, _, _ in entries], [args.json])
    if args.text:
        atomic_write_text(args.text, text)
    return EXIT_OK


def _synth_out(path: str | None, default: str) -> str:
    return path if path else os.path.join(cache_dir(), default)


def cmd_synth(args) -> int:
    if args.kind == "blobs":
        out = _synth_out(args.out, f"blobs-{args.seed}.json")
        ds = synth_blobs(args.classes, args.dim, args.per_class, args.spread, args.seed)
        ds.save(out)
        outputs = [out]
        if args.ood_out:
            ood = synth_ood(args.dim, args.ood_n, args.offset, args.seed + 1, reference=ds)
            ood.save(args.ood_out)
            outputs.append(args.ood_out)
    else:
        from .glyphs import write_corpus

        prefix = _synth_out(args.out, f"{args.corpus}-{args.seed}")
        outputs = list(write_corpus(prefix, args.corpus, args.n, args.seed))
        out = prefix
    for p in outputs:
        print(p)
    write_manifest(out, f"synth {args.kind}", args.argv, [], outputs, None, args.seed)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dismax", description="Train, calibrate and evaluate distance-based OOD detectors.")
    common = _Parser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", help="only print warnings and results")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train a checkpoint")
    t.add_argument("--config", help="JSON config file; flags override its keys")
    t.add_argument("--preset", choices=sorted(pipeline.PRESETS))
    t.add_argument("--data", help="training data: FILE.json or IMAGES,LABELS")
    t.add_argument("--loss", choices=pipeline.LOSSES)
    t.add_argument("--layer-dims", help="comma separated, e.g. 784,256,128")
    t.add_argument("--lr-decay-epochs", help="comma separated epochs where the LR drops")
    t.add_argument("--no-nesterov", action="store_true")
    for name, kind in CONFIG_FLAGS.items():
        if name != "loss":
            t.add_argument("--" + name.replace("_", "-"), type=kind)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", parents=[common], help="fit the temperature on a held-out split")
    c.add_argument("checkpoint")
    c.add_argument("--val", help="validation data; default recreates the training hold-out")
    c.add_argument("--bins", type=int, default=15)
    c.add_argument("--out", help="output checkpoint (default: overwrite input)")
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("evaluate", parents=[common], help="score ID and OOD sets")
    e.add_argument("checkpoint")
    e.add_argument("--id", required=True, help="labeled ID test data")
    e.add_argument("--ood", action="append", default=[], metavar="NAME=DATA")
    e.add_argument("--scores", default=",".join(SCORE_KINDS))
    e.add_argument("--no-ece", action="store_true", help="skip ECE (no calibration needed)")
    e.add_argument("--label", help="method label in the report")
    e.add_argument("--dump", required=True, help="per-example score CSV")
    e.add_argument("--json", help="write the report as JSON")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", parents=[common], help="tabulate score dumps")
    r.add_argument("dumps", nargs="+", metavar="DUMP[:SCORES]")
    r.add_argument("--json", help="write the table as JSON")
    r.add_argument("--text", help="write the text table to a file")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("synth", parents=[common], help=f"generate datasets (default dir ${CACHE_ENV})")
    s.add_argument("kind", choices=("blobs", "glyphs"))
    s.add_argument("--out", help="output file (blobs) or IDX prefix (glyphs)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--per-class", type=int, default=200)
    s.add_argument("--spread", type=float, default=1.0)
    s.add_argument("--ood-out", help="also write a shifted OOD set here")
    s.add_argument("--ood-n", type=int, default=500)
    s.add_argument("--offset", type=float, default=200.0)
    s.add_argument("--corpus", choices=("digits", "letters", "shapes"), default="digits")
    s.add_argument("--n", type=int, default=1000)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args.argv = argv
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        # non-finite results are detected explicitly and raised as NumericError
        with np.errstate(all="ignore"):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
