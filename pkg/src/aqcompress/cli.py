"""Command-line entry point: ``aqcompress <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.

Every subcommand prints one JSON run record per line on stdout.  Commands
that write files also append the same records to ``--record`` (default
``<out>.run.jsonl``).  Record schema (version 1)::

    {"schema": 1, "command": str, "kind": "run" | "part" | "eval",
     "config": {flag: value, ...}, "versions": {...}, "metrics": {...}}

``analyze`` writes comma-separated tables with a header row into ``--out-dir``:

    sharing.csv  group,<group names...>       pairwise sharing factors
    usage.csv    codebook,rank,fraction,count,coverage
    types.csv    type,codebook,basis,percent  share of that type's pages using the basis
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from typing import List, Optional

import numpy as np

from . import __version__, aq_model, entropy_codec, pager, sharing, task_zoo
from .finetune import FinetuneConfig, finetune_loop
from .pipeline import compress_archive, decompress, reassemble
from .tensor_io import ArchiveError, TensorArchive, read_archive, write_archive

SCHEMA = 1


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _layers(text):
    try:
        widths = tuple(int(w) for w in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}")
    if len(widths) < 2 or min(widths) < 1:
        raise argparse.ArgumentTypeError("need at least two positive widths")
    return widths


def _versions():
    return {"aqcompress": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _config(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


def _emit(args, records: List[dict], out_path: Optional[str] = None):
    lines = [json.dumps(r, sort_keys=True, default=_jsonable) for r in records]
    for line in lines:
        print(line)
    target = getattr(args, "record", None) or (out_path + ".run.jsonl" if out_path else None)
    if target:
        with open(target, "a", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def _record(args, kind, metrics):
    return {"schema": SCHEMA, "command": args.command, "kind": kind, "config": _config(args),
            "versions": _versions(), "metrics": metrics}


def _add_dataset_args(p, required=False):
    p.add_argument("--dataset", choices=("blobs", "idx"), default=None if not required else "blobs",
                   help="blobs: generated Gaussian clusters; idx: --idx-images/--idx-labels files")
    p.add_argument("--n-per-class", type=_positive_int, default=200)
    p.add_argument("--spread", type=float, default=2.0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--idx-images")
    p.add_argument("--idx-labels")
    p.add_argument("--idx-limit", type=_positive_int)
    p.add_argument("--activation", choices=task_zoo.ACTIVATIONS, default="relu")


def _load_dataset(args, widths) -> task_zoo.Dataset:
    if args.dataset == "blobs":
        return task_zoo.make_blobs(args.n_per_class, widths[-1], widths[0], args.spread, args.data_seed)
    if not args.idx_images or not args.idx_labels:
        raise UsageError("--dataset idx needs non-empty --idx-images and --idx-labels")
    for path in (args.idx_images, args.idx_labels):
        if not os.path.exists(path):
            raise UsageError(f"dataset file not found: {path}")
    data = task_zoo.load_idx_dataset(args.idx_images, args.idx_labels, args.idx_limit)
    if data.features.shape[1] != widths[0]:
        raise UsageError(f"dataset has {data.features.shape[1]} features, model expects {widths[0]}")
    return data


def _read_bytes(path):
    if not os.path.exists(path):
        raise UsageError(f"no such file: {path}")
    with open(path, "rb") as fh:
        return fh.read()


def _load_any(path) -> TensorArchive:
    """Read an AQT0 checkpoint, or decode an AQPK container."""
    blob = _read_bytes(path)
    if blob[:4] == entropy_codec.MAGIC:
        return decompress(blob)
    return read_archive(blob)


def _part_path(out, i, parts):
    if parts == 1:
        return out
    root, ext = os.path.splitext(out)
    return f"{root}.part{i}{ext or '.aqpk'}"


# -- subcommands -------------------------------------------------------------


def cmd_train_task(args):
    spec = task_zoo.MlpSpec(args.layers, args.activation, args.seed)
    data = _load_dataset(args, args.layers)
    model, history = task_zoo.train_task(spec, data, args.epochs, args.lr, args.seed, args.batch_size)
    write_archive(model.to_archive(), args.out)
    metrics = {"train_accuracy": history[-1]["accuracy"] if history else task_zoo.evaluate(model, data),
               "final_loss": history[-1]["loss"] if history else None,
               "history": history, "T": sum(p.size for p in model.params)}
    _emit(args, [_record(args, "run", metrics)], args.out)


def cmd_compress(args):
    archive = read_archive(_read_bytes(args.inp))
    params = dict(page_size=args.D, n_codebooks=args.M, n_basis=args.K, hidden=args.H, tau=args.tau,
                  epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                  patience=args.patience, random_state=args.seed)
    T = sum(e.size for e in archive)
    if args.parts > T:
        raise UsageError(f"--parts {args.parts} exceeds the {T} scalars in the checkpoint")
    results = compress_archive(archive, args.parts, **params)
    records, restored = [], []
    for res in results:
        path = _part_path(args.out, res.index, args.parts)
        with open(path, "wb") as fh:
            fh.write(res.container)
        restored.append(decompress(res.container))
        records.append(_record(args, "part", {**res.metrics, "path": path}))

    summary = {"parts": args.parts, "paths": [_part_path(args.out, i, args.parts) for i in range(args.parts)],
               "container_bytes_total": sum(len(r.container) for r in results)}
    code_bits = {k: sum(r.metrics[k] for r in results) for k in ("bitwise_bits", "huffman_bits", "sorted_huffman_bits")}
    book_bits = sum(r.metrics["codebook_bits"] for r in results)
    for key, bits in code_bits.items():
        summary[key.replace("_bits", "_ratio")] = T * 32 / (bits + book_bits)
    if args.dataset:
        model = task_zoo.TaskModel.from_archive(archive, args.activation)
        data = _load_dataset(args, model.spec.widths)
        full = restored[0] if args.parts == 1 else reassemble(restored, archive)
        summary["accuracy_original"] = task_zoo.evaluate(model, data)
        summary["accuracy_compressed"] = task_zoo.evaluate(
            task_zoo.TaskModel.from_archive(full, args.activation), data)
    records.append(_record(args, "run", summary))
    _emit(args, records, args.out)


def cmd_decompress(args):
    if len(args.inp) > 1 and not args.template:
        raise UsageError("several containers need --template to restore the tensor layout")
    archives = [decompress(_read_bytes(p)) for p in args.inp]
    if args.template:
        archive = reassemble(archives, read_archive(_read_bytes(args.template)))
    else:
        archive = archives[0]
    n = write_archive(archive, args.out)
    _emit(args, [_record(args, "run", {"bytes_written": n, "tensors": len(archive)})], args.out)


def cmd_finetune(args):
    cont = entropy_codec.read_container(_read_bytes(args.inp))
    template = read_archive(_read_bytes(args.task))
    model = task_zoo.TaskModel.from_archive(template, args.activation)
    if sum(p.size for p in model.params) != cont.manifest.total_scalars:
        raise UsageError("task checkpoint parameter count differs from the container")
    data = _load_dataset(args, model.spec.widths)
    cfg = FinetuneConfig(lr=args.lr, optimizer=args.optimizer, steps=args.steps,
                         batch_size=args.batch_size, seed=args.seed, eval_every=args.eval_every)
    books, history = finetune_loop(cont.books, cont.codes, cont.manifest, model.spec, data, cfg)
    blob = entropy_codec.write_container(books, cont.codes, cont.manifest, cont.hyper, extra=cont.extra or None)
    with open(args.out, "wb") as fh:
        fh.write(blob)
    records = [_record(args, "eval", h) for h in history]
    records.append(_record(args, "run", {
        "accuracy_before": history[0]["accuracy"],
        "accuracy_best": max(h["accuracy"] for h in history),
        "container_bytes": len(blob),
    }))
    _emit(args, records, args.out)


def cmd_eval(args):
    archive = _load_any(args.inp)
    model = task_zoo.TaskModel.from_archive(archive, args.activation)
    data = _load_dataset(args, model.spec.widths)
    _emit(args, [_record(args, "run", {"accuracy": task_zoo.evaluate(model, data), "n": len(data)})])


def cmd_analyze(args):
    cont = entropy_codec.read_container(_read_bytes(args.inp))
    K = cont.hyper.K
    if args.groups == "per-tensor":
        groups = sharing.groups_per_tensor(cont.manifest)
    else:
        try:
            groups = sharing.parse_group_file(_read_bytes(args.groups).decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise UsageError(f"bad group file: {exc}") from exc
    if args.types == "auto":
        types = sharing.infer_types(cont.manifest)
    else:
        try:
            types = sharing.parse_type_file(_read_bytes(args.types).decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise UsageError(f"bad type file: {exc}") from exc
    try:
        names, S = sharing.sharing_matrix(cont.codes, cont.manifest, groups, K)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    usage = sharing.usage_stats(cont.codes, K)
    by_type = sharing.type_sharing(cont.codes, cont.manifest, types, K)

    os.makedirs(args.out_dir, exist_ok=True)
    tables = {
        "sharing.csv": sharing.write_csv(["group", *names], [[n, *map(repr, row)] for n, row in zip(names, S.tolist())]),
        "usage.csv": sharing.write_csv(
            ["codebook", "rank", "fraction", "count", "coverage"],
            [[u["codebook"], r, repr(float(u["fraction"][r])), int(u["sorted_counts"][r]), repr(float(u["coverage"][r]))]
             for u in usage for r in range(K)]),
        "types.csv": sharing.write_csv(
            ["type", "codebook", "basis", "percent"],
            [[kind, m, k, repr(float(pct[m, k]))] for kind, pct in by_type.items()
             for m in range(pct.shape[0]) for k in range(K)]),
    }
    for fname, text in tables.items():
        with open(os.path.join(args.out_dir, fname), "w", encoding="utf-8") as fh:
            fh.write(text)
    ten = max(1, K // 10)
    metrics = {"groups": names, "sharing_min": float(S.min()),
               "top10pct_coverage": [float(u["coverage"][ten - 1]) for u in usage],
               "tables": sorted(tables)}
    _emit(args, [_record(args, "run", metrics)], os.path.join(args.out_dir, "analyze"))


def cmd_ratio(args):
    P = -(-args.T // args.D)
    bw = entropy_codec.bitwise_bits(P, args.M, args.K)
    table_bits = args.table_bits if args.table_bits is not None else 8 * args.K
    metrics = {"P": P, "bitwise_bits": bw,
               "bitwise_ratio": entropy_codec.compression_ratio(
                   args.T, args.D, args.M, args.K, P, bw, args.include_table, table_bits)}
    if args.huffman_bits is not None:
        metrics["huffman_ratio"] = entropy_codec.compression_ratio(
            args.T, args.D, args.M, args.K, P, args.huffman_bits, args.include_table, table_bits)
    _emit(args, [_record(args, "run", metrics)])


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aqcompress", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-task", help="train a small MLP and save an AQT0 checkpoint")
    p.add_argument("--layers", type=_layers, default=(2, 64, 64, 3))
    p.add_argument("--epochs", type=_positive_int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--record")
    _add_dataset_args(p, required=True)
    p.set_defaults(func=cmd_train_task)

    p = sub.add_parser("compress", help="learn codes for a checkpoint and write AQPK container(s)")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--D", type=_positive_int, default=8, help="page size")
    p.add_argument("--M", type=_positive_int, default=4, help="codebooks")
    p.add_argument("--K", type=_positive_int, default=32, help="basis vectors per codebook")
    p.add_argument("--H", type=_positive_int, default=32, help="encoder hidden width")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--epochs", type=_positive_int, default=500)
    p.add_argument("--batch-size", type=_positive_int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=_positive_int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parts", type=_positive_int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--record")
    _add_dataset_args(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="rebuild an AQT0 checkpoint from container(s)")
    p.add_argument("--in", dest="inp", nargs="+", required=True)
    p.add_argument("--template", help="original checkpoint; required to join several parts")
    p.add_argument("--out", required=True)
    p.add_argument("--record")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("finetune", help="finetune container codebooks on a task loss")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--task", required=True, help="AQT0 checkpoint defining the task architecture")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--eval-every", type=_positive_int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--record")
    _add_dataset_args(p, required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint or container")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--record")
    _add_dataset_args(p, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="sharing-factor, usage and type tables for a container")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--groups", default="per-tensor", help="'per-tensor' or a CSV of name,start,stop")
    p.add_argument("--types", default="auto", help="'auto' (by name suffix) or a CSV of name,weight|bias")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--record")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ratio", help="compression ratios from sizes alone")
    p.add_argument("--T", type=_positive_int, required=True)
    p.add_argument("--D", type=_positive_int, required=True)
    p.add_argument("--M", type=_positive_int, required=True)
    p.add_argument("--K", type=_positive_int, required=True)
    p.add_argument("--huffman-bits", type=_positive_int)
    p.add_argument("--include-table", action="store_true")
    p.add_argument("--table-bits", type=int)
    p.set_defaults(func=cmd_ratio)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"aqcompress {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ArchiveError, entropy_codec.ContainerError, pager.LayoutError, aq_model.TrainingError,
            aq_model.NumericError, task_zoo.TaskTrainingError, ValueError, RuntimeError, OSError) as exc:
        print(f"aqcompress {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
