"""Command-line entry point: ``dybnn <subcommand> ...``.

Subcommands: ``train``, ``eval``, ``count-ops``, ``compare-ops``, ``export``
and ``inspect``.  Exit codes: 0 success, 2 configuration error (including bad
checkpoints and shape mismatches), 3 data error, 4 numerical failure.  Each
failure prints a single diagnostic line to stderr.

A training run is described by a document with three sections::

    model: <model config>        # or a bare model config file
    train: <TrainConfig fields>
    data:  {dataset: mnist|cifar10, dir: ..., train_limit: N, test_limit: N}

``--set section.key=value`` overrides any field (list items by index, e.g.
``model.blocks.1.stride=2``); values are parsed as YAML scalars.  Every run
writes the fully resolved document to ``<out>/resolved.yaml``, which can be
passed back to ``--config`` to replay the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .binconv import BINARY_WEIGHTS
from .config import ModelConfig, bundled_config_path, config_from_dict
from .cost import CountingConvention, compare_configs, count_ops, format_delta, format_report
from .datasets import DATA_ENV, load_dataset
from .errors import DataError, DybnnError, InvalidConfig, NonFiniteLoss, ShapeMismatch
from .serialize import load_model, read_chunks
from .tensor import BitTensor
from .trainer import CROSS_ENTROPY, DISTILLATION, TrainConfig, evaluate, load_teacher, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DATA_KEYS = {"dataset", "dir", "train_limit", "test_limit"}
LOSS_ALIASES = {"ce": CROSS_ENTROPY, "distill": DISTILLATION,
                CROSS_ENTROPY: CROSS_ENTROPY, DISTILLATION: DISTILLATION}


# ---------------------------------------------------------------------------
# run documents


def _read_yaml(path):
    p = Path(path)
    if not p.exists():
        bundled = bundled_config_path(str(path))
        if bundled is None:
            raise InvalidConfig("", f"no config file or bundled config named {path!r}")
        p = bundled
    try:
        return yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise InvalidConfig("", f"{p}: not valid YAML ({exc})") from None


def guess_dataset(input_shape):
    shape = tuple(input_shape)
    if shape == (1, 28, 28):
        return "mnist"
    if shape == (3, 32, 32):
        return "cifar10"
    raise InvalidConfig("data.dataset", f"cannot infer a dataset for input shape {shape}; set it")


def load_run_document(path) -> dict:
    """``{"model", "train", "data"}`` from a run document or bare model config."""
    raw = _read_yaml(path)
    if not isinstance(raw, dict):
        raise InvalidConfig("", "config must be a mapping")
    if "model" in raw:
        unknown = set(raw) - {"model", "train", "data"}
        if unknown:
            raise InvalidConfig(sorted(unknown)[0], "unknown key")
        doc = {"model": raw["model"], "train": dict(raw.get("train") or {}), "data": dict(raw.get("data") or {})}
    else:
        doc = {"model": raw, "train": {}, "data": {}}
    return doc


def apply_override(doc: dict, assignment: str):
    """Apply one ``dotted.key=value`` override in place."""
    if "=" not in assignment:
        raise InvalidConfig(assignment, "override must look like key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] not in doc:
        raise InvalidConfig(key, f"unknown section {parts[0]!r} (expected model, train or data)")
    try:
        parsed = yaml.safe_load(value)
    except yaml.YAMLError:
        parsed = value
    node = doc
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        where = ".".join(parts[: i + 1])
        if isinstance(node, list):
            if not part.isdigit() or int(part) >= len(node):
                raise InvalidConfig(where, "list index out of range")
            part = int(part)
        elif not isinstance(node, dict):
            raise InvalidConfig(where, "cannot descend into a scalar")
        if last:
            node[part] = parsed
        else:
            if isinstance(node, dict) and node.get(part) is None:
                node[part] = {}
            node = node[part]


def resolve(doc: dict):
    """Validate a run document; returns ``(ModelConfig, TrainConfig, data dict)``."""
    model_cfg = config_from_dict(doc["model"])
    train_cfg = TrainConfig.from_dict(doc["train"])
    data = dict(doc["data"])
    unknown = set(data) - DATA_KEYS
    if unknown:
        raise InvalidConfig(f"data.{sorted(unknown)[0]}", "unknown key")
    data.setdefault("dataset", guess_dataset(model_cfg.input_shape))
    data.setdefault("dir", None)
    data.setdefault("train_limit", None)
    data.setdefault("test_limit", None)
    for k in ("train_limit", "test_limit"):
        v = data[k]
        if v is not None and (isinstance(v, bool) or not isinstance(v, int) or v < 1):
            raise InvalidConfig(f"data.{k}", "must be a positive integer")
    # one seed drives initialization, shuffling and augmentation
    model_cfg = model_cfg.with_seed(train_cfg.seed)
    return model_cfg, train_cfg, data


def resolved_document(model_cfg: ModelConfig, train_cfg: TrainConfig, data: dict) -> dict:
    return {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": data}


def _load_data(data):
    try:
        return load_dataset(data["dataset"], data["dir"])
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None


def _check_input(model_cfg, dataset):
    if tuple(dataset.input_shape) != tuple(model_cfg.input_shape):
        raise ShapeMismatch(
            f"dataset images have shape {tuple(dataset.input_shape)}, model expects {tuple(model_cfg.input_shape)}"
        )


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    doc = load_run_document(args.config)
    for assignment in args.set or []:
        apply_override(doc, assignment)
    if args.seed is not None:
        doc["train"]["seed"] = args.seed
    if args.protocol:
        doc["train"]["protocol"] = args.protocol
    if args.loss:
        doc["train"]["loss"] = LOSS_ALIASES[args.loss]
    if args.teacher:
        doc["train"]["teacher"] = args.teacher
    if args.epochs is not None:
        doc["train"]["epochs"] = args.epochs
    if args.data:
        doc["data"]["dir"] = args.data
    if args.dataset:
        doc["data"]["dataset"] = args.dataset
    model_cfg, train_cfg, data = resolve(doc)

    train_set, test_set = _load_data(data)
    _check_input(model_cfg, train_set)
    if data["train_limit"]:
        train_set = train_set.subset(data["train_limit"])
    if data["test_limit"]:
        test_set = test_set.subset(data["test_limit"])
    teacher = load_teacher(train_cfg.teacher) if train_cfg.loss == DISTILLATION else None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.log"
    if metrics_path.exists():
        metrics_path.unlink()
    (out / "resolved.yaml").write_text(
        yaml.safe_dump(resolved_document(model_cfg, train_cfg, data), sort_keys=True)
    )
    model, metrics = train(model_cfg, train_set, test_set, train_cfg, out_dir=out, teacher=teacher)
    final = [r for r in metrics.records if r["split"] == "test"][-1]
    print(f"final test top1={final['top1']:.4f} loss={final['loss']:.6f} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint, kernel=args.kernel)
    dataset = args.dataset or guess_dataset(model.cfg.input_shape)
    _, test_set = _load_data({"dataset": dataset, "dir": args.data})
    _check_input(model.cfg, test_set)
    loss, top1 = evaluate(model, test_set, batch_size=args.batch_size, limit=args.limit)
    n = len(test_set) if args.limit is None else min(args.limit, len(test_set))
    print(f"samples={n} top1={top1:.4f} loss={loss:.6f}")
    return EXIT_OK


def _convention(args):
    return CountingConvention(bn_flops_per_element=args.bn_flops, prelu_flops_per_element=args.prelu_flops)


def _model_config(path) -> ModelConfig:
    doc = load_run_document(path)
    return config_from_dict(doc["model"])


def cmd_count_ops(args) -> int:
    report = count_ops(_model_config(args.config), _convention(args))
    sys.stdout.write(format_report(report, args.format))
    return EXIT_OK


def cmd_compare_ops(args) -> int:
    report = compare_configs(_model_config(args.a), _model_config(args.b), _convention(args))
    sys.stdout.write(format_delta(report, args.format))
    return EXIT_OK


def export_arrays(model) -> dict:
    """Deployable arrays: packed sign bits for binary convolutions, float32 otherwise."""
    out = {}
    binary = {id(conv) for conv in model.binary_convs()} if model.weight_mode == BINARY_WEIGHTS else set()
    for prefix, mod in model._named_modules():
        for local, p in mod.params().items():
            name = f"{prefix}{local}"
            if id(mod) in binary and local == "weight":
                bits: BitTensor = mod.packed()
                out[f"{name}.packed"] = bits.words
                out[f"{name}.shape"] = np.asarray(bits.shape, dtype=np.int64)
            else:
                out[name] = p.data.astype(np.float32)
        for local in mod.own_buffers():
            out[f"{prefix}{local}"] = mod.named_buffers()[local].astype(np.float32)
    return out


def cmd_export(args) -> int:
    model = load_model(args.checkpoint)
    arrays = export_arrays(model)
    arrays["config"] = np.frombuffer(model.cfg.canonical_text().encode(), dtype=np.uint8)
    np.savez(args.out, **arrays)
    print(f"wrote {len(arrays)} arrays to {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    chunks = read_chunks(Path(args.checkpoint).read_bytes())
    for name, payload in chunks.items():
        print(f"{name:<48} {len(payload):>12,d} bytes")
    if "config" in chunks:
        cfg = json.loads(chunks["config"])
        state = json.loads(chunks.get("state", b"{}") or b"{}")
        print(f"model: {cfg.get('name') or '<unnamed>'}  activation={cfg.get('activation')}  "
              f"blocks={len(cfg.get('blocks', []))}  weight_mode={state.get('weight_mode')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dybnn", description="Binary networks with dynamic activations.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch metrics to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model (one-step or two-step)")
    t.add_argument("--config", required=True, help="config file, resolved.yaml, or bundled config name")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--protocol", choices=["one-step", "two-step"])
    t.add_argument("--loss", choices=sorted(LOSS_ALIASES))
    t.add_argument("--teacher", help="teacher checkpoint for distillation")
    t.add_argument("--epochs", type=int)
    t.add_argument("--data", help=f"dataset directory (default ${DATA_ENV}/<dataset>)")
    t.add_argument("--dataset", choices=["mnist", "cifar10"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("checkpoint")
    e.add_argument("--data", help=f"dataset directory (default ${DATA_ENV}/<dataset>)")
    e.add_argument("--dataset", choices=["mnist", "cifar10"])
    e.add_argument("--limit", type=int, help="evaluate the first N test samples")
    e.add_argument("--batch-size", type=int, default=256)
    e.add_argument("--kernel", choices=["dense", "popcount"], default="dense")
    e.set_defaults(func=cmd_eval)

    for name, func, helptext in (("count-ops", cmd_count_ops, "per-layer BOPs/FLOPs/OPs"),
                                 ("compare-ops", cmd_compare_ops, "per-layer OPs delta of two configs")):
        c = sub.add_parser(name, help=helptext)
        if name == "count-ops":
            c.add_argument("config")
        else:
            c.add_argument("a")
            c.add_argument("b")
        c.add_argument("--format", choices=["text", "structured"], default="text")
        c.add_argument("--bn-flops", type=int, default=1, help="FLOPs per batch-norm output element")
        c.add_argument("--prelu-flops", type=int, default=1, help="FLOPs per PReLU output element")
        c.set_defaults(func=func)

    x = sub.add_parser("export", help="write packed binary weights to .npz")
    x.add_argument("checkpoint")
    x.add_argument("out")
    x.set_defaults(func=cmd_export)

    i = sub.add_parser("inspect", help="list the chunks of a model file")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def _exit_code(exc) -> int:
    if isinstance(exc, NonFiniteLoss):
        return EXIT_NUMERIC
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_CONFIG


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except DybnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
