"""Command-line entry point: pretrain, stream, sweep, ablate, coreset, report."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from ..training import LoraConfig, MethodSpec
from . import experiment as ex
from .checkpoint import load_checkpoint, save_checkpoint


_UNSET = object()  # distinguishes an omitted flag from an explicit null


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _flag_paths(tree: dict, prefix=()) -> list:
    out = []
    for key, val in tree.items():
        if isinstance(val, dict):
            out += _flag_paths(val, prefix + (key,))
        else:
            out.append(prefix + (key,))
    return out


def _schema() -> dict:
    """Every overridable leaf, including the optional LoRA block."""
    tree = ex.ExperimentConfig().to_dict()
    tree["stream"]["method"]["lora"] = dataclasses.asdict(LoraConfig())
    return tree


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _set_path(tree: dict, path, value):
    for key in path[:-1]:
        if not isinstance(tree.get(key), dict):
            tree[key] = {}
        tree = tree[key]
    tree[path[-1]] = value


def build_config(args, stored: dict | None = None) -> ex.ExperimentConfig:
    """Defaults, then a checkpoint's stored config, then ``--config``, then dotted flags."""
    tree = ex.ExperimentConfig().to_dict()
    if stored:
        tree = _deep_merge(tree, stored)
    if getattr(args, "config", None):
        tree = _deep_merge(tree, json.loads(Path(args.config).read_text()))
    for path in _flag_paths(_schema()):
        val = getattr(args, "cfg__" + "__".join(path), _UNSET)
        if val is not _UNSET:
            _set_path(tree, path, val)
    return ex.ExperimentConfig.from_dict(tree)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON experiment config")
    group = p.add_argument_group("config overrides (values parsed as JSON, else as strings)")
    for path in _flag_paths(_schema()):
        group.add_argument("--" + ".".join(path), dest="cfg__" + "__".join(path), type=_parse_value,
                           default=_UNSET, metavar="V")


def _load_base(path):
    ckpt = load_checkpoint(path)
    stored = ckpt.extra.get("experiment", {})
    return ckpt, stored


def _write(path, data):
    if path is None or path == "-":
        sys.stdout.write(data if isinstance(data, str) else data.decode())
    else:
        Path(path).write_bytes(data if isinstance(data, bytes) else data.encode())


def cmd_pretrain(args):
    cfg = build_config(args).with_seed(args.seed)
    dataset = ex.make_dataset(cfg)
    log = (lambda point: print(json.dumps(point), file=sys.stderr)) if args.verbose else None
    _, ckpt, _ = ex.pretrain_base(dataset, cfg, args.steps, log=log)
    save_checkpoint(ckpt, args.out)
    print(f"wrote {args.out} ({ckpt.store.summary()})")


def _base_and_config(args):
    ckpt, stored = _load_base(args.checkpoint)
    cfg = build_config(args, stored)
    # the fact universe is tied to the base checkpoint, never to command-line overrides
    cfg = dataclasses.replace(cfg, model=ckpt.config, data=ex.ExperimentConfig.from_dict(stored).data if stored else cfg.data)
    return ckpt, cfg, ex.make_dataset(cfg)


def cmd_stream(args):
    ckpt, cfg, dataset = _base_and_config(args)
    model = ckpt.build_model()
    records = []
    ex.run_continual_stream(model, dataset, cfg.stream, ckpt.store, seed=args.seed,
                            on_report=lambda r: records.append({"method": cfg.stream.method.label(), **r.to_record()}))
    _write(args.out, ex.metrics_jsonl(records))
    if args.save:
        save_checkpoint(dataclasses.replace(ckpt, params=model.state()), args.save)


def cmd_sweep(args):
    ckpt, cfg, dataset = _base_and_config(args)
    grid = [MethodSpec.from_dict(d) for d in json.loads(Path(args.grid).read_text())]
    rows = ex.pareto_sweep(grid, ckpt.build_model(), dataset, cfg.stream, ckpt.store, seed=args.seed)
    _write(args.out, ex.sweep_csv(rows))


def cmd_ablate(args):
    ckpt, cfg, dataset = _base_and_config(args)
    rows = ex.ablate(ckpt.build_model(), dataset, cfg.stream, ckpt.store, seeds=args.seeds, arms=args.arms)
    _write(args.out, ex.sweep_csv(rows))


def cmd_coreset(args):
    ckpt, cfg, dataset = _base_and_config(args)
    model = ckpt.build_model()
    out = []
    for fact in dataset.stream_facts[: args.facts]:
        core, membership = ex.compute_core_set(model, fact, dataset.layout)
        out.append({"fact_id": fact.fact_id, "core_size": int(core.size), "core": core.tolist(),
                    "membership": membership})
    _write(args.out, ex.metrics_jsonl(out))


def _summarize_jsonl(path: Path) -> dict:
    lines = [json.loads(x) for x in path.read_text().splitlines() if x.strip()]
    first, last = lines[0], lines[-1]
    return {
        "source": path.name, "method": last.get("method", ""), "facts_seen": last.get("facts_seen"),
        "target_acc": last.get("target_acc"), "heldout_acc": last.get("heldout_acc"),
        "heldout_acc_drop": first.get("heldout_acc", 0) - last.get("heldout_acc", 0),
        "heldout_nll_increase": last.get("heldout_nll", 0) - first.get("heldout_nll", 0),
    }


def cmd_report(args):
    rows = []
    for name in args.inputs:
        path = Path(name)
        if path.suffix == ".csv":
            with path.open() as fh:
                rows += [{"source": path.name, **r} for r in csv.DictReader(fh)]
        else:
            rows.append(_summarize_jsonl(path))
    fields = list(dict.fromkeys(k for r in rows for k in r))
    lines = [",".join(fields)] + [",".join(str(r.get(k, "")) for k in fields) for r in rows]
    _write(args.out, "\n".join(lines) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsemem", description="Sparse memory finetuning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a base model and its background store")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("stream", help="stream new facts into a base with one method")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="-", help="metrics JSON-lines path")
    p.add_argument("--save", help="write the finetuned model here")
    _add_config_flags(p)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("sweep", help="one stream per method spec in a JSON list")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="ranking and background-corpus arms")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--arms", nargs="+", default=["tfidf", "tf_only", "memory_all", "stream_background"])
    p.add_argument("--out", default="-")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("coreset", help="core-set analysis for stream facts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--facts", type=int, default=10)
    p.add_argument("--out", default="-")
    _add_config_flags(p)
    p.set_defaults(func=cmd_coreset)

    p = sub.add_parser("report", help="aggregate metrics files and sweep tables into one CSV")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
