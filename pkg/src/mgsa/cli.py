"""Command-line entry point: ``mgsa <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import config as cfg
from .partition import ConfigError
from .treebank import generate_corpus, read_corpus, split_corpus, split_of, write_corpus

log = logging.getLogger("mgsa")


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", type=Path, help="flat key = value settings file")
    p.add_argument("--seed", type=int, help="overrides the seed from the config")
    p.add_argument("--out-dir", type=Path, default=Path("out"), help="where outputs are written (default: out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgsa", description="Multi-granularity self-attention toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a synthetic treebank with task labels")
    _common(p)
    p.add_argument("--count", type=int, help="sentences (default: corpus_size from config, else 5000)")

    p = sub.add_parser("train", help="train an encoder and task classifiers")
    _common(p)
    p.add_argument("--corpus", type=Path, help="JSONL corpus (default: generate from config)")

    p = sub.add_parser("evaluate", help="accuracy of a checkpoint on a corpus split")
    _common(p, config=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--split", choices=("train", "valid", "test", "all"), default="test")
    p.add_argument("--tasks", help="comma-separated subset of tasks")

    p = sub.add_parser("matrix", help="train and compare model variants")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of ops and a small model")
    _common(p, config=False)
    p.add_argument("--skip-model", action="store_true", help="only check primitive ops")

    p = sub.add_parser("dump-attention", help="attention maps of one sentence as JSON and heatmaps")
    _common(p, config=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--index", type=int, default=0, help="sentence index in the corpus")

    sub.add_parser("schema", help="list configuration keys")
    return parser


def _settings(args) -> tuple[dict, dict]:
    if getattr(args, "config", None) is None:
        return {}, {}
    return cfg.typed(cfg.read_file(args.config))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_generate(args) -> int:
    settings, _ = _settings(args)
    count = args.count if args.count is not None else int(settings.get("corpus_size", 5000))
    seed = args.seed if args.seed is not None else int(settings.get("corpus_seed", 0))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    examples = generate_corpus(None, count, seed)
    path = args.out_dir / "corpus.jsonl"
    write_corpus(path, examples)
    sizes = {s: len(v) for s, v in split_corpus(examples).items()}
    print(f"wrote {count} sentences to {path} (train {sizes['train']}, valid {sizes['valid']}, test {sizes['test']})")
    return 0


def _corpus_splits(args, settings) -> dict:
    if args.corpus is not None:
        return split_corpus(read_corpus(args.corpus))
    return split_corpus(generate_corpus(None, int(settings.get("corpus_size", 5000)), int(settings.get("corpus_seed", 0))))


def cmd_train(args) -> int:
    from . import plotting
    from .probe import train

    settings, overrides = _settings(args)
    if overrides:
        raise ConfigError("per-variant overrides only apply to matrix files")
    config = cfg.train_config(settings)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    splits = _corpus_splits(args, settings)
    result = train(config, splits["train"], splits["valid"])
    args.out_dir.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(args.out_dir / "checkpoint.json")
    history = {"epoch_loss": result.epoch_loss, "epoch_parts": result.epoch_parts, "evals": result.history,
               "steps": result.steps}
    _write_json(args.out_dir / "history.json", history)
    plotting.loss_curves({"variants": [{"label": "model", "runs": [{"seed": config.seed, **history}]}]},
                         args.out_dir / "loss.png")
    final = result.history[-1]["valid"] if result.history else {}
    print("valid " + " ".join(f"{k}={100 * v:.2f}" for k, v in final.items()))
    return 0


def cmd_evaluate(args) -> int:
    from .probe import Checkpoint, evaluate, format_table

    checkpoint = Checkpoint.load(args.checkpoint)
    examples = read_corpus(args.corpus)
    if args.split != "all":
        examples = [ex for i, ex in enumerate(examples) if split_of(i) == args.split]
    tasks = [t.strip() for t in args.tasks.split(",")] if args.tasks else None
    acc = evaluate(checkpoint, examples, tasks)
    names = list(acc)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(args.out_dir / "evaluation.json", {"split": args.split, "accuracy": acc, "sentences": len(examples)})
    table = format_table([(str(args.checkpoint.name), acc)], names)
    (args.out_dir / "evaluation.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_matrix(args) -> int:
    from . import plotting
    from .probe import report_table, run_experiment_matrix

    settings, overrides = _settings(args)
    spec = cfg.matrix_spec(settings, overrides)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seeds=[args.seed])
    report = run_experiment_matrix(spec, args.out_dir)
    if report["variants"]:
        plotting.accuracy_bars(report, args.out_dir / "accuracy.png")
        plotting.loss_curves(report, args.out_dir / "loss.png")
    print(report_table(report), end="")
    failed = [v["name"] for v in report["variants"] if v["status"] != "ok"]
    return 1 if failed else 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_ops, model_gradcheck

    seed = args.seed if args.seed is not None else 0
    ops = check_ops(seed)
    out: dict = {"ops": ops, "ops_tolerance": 1e-4}
    lines = [f"{name:<32} {err:.3e}" for name, err in ops.items()]
    ok = max(ops.values()) < 1e-4
    if not args.skip_model:
        check = model_gradcheck(seed=seed)
        out["model"] = {"worst": check.worst, "n_params": check.n_params, "errors": check.errors}
        out["model_tolerance"] = 1e-3
        lines.append(f"{'model (' + str(check.n_params) + ' params)':<32} {check.worst:.3e}")
        ok = ok and check.worst < 1e-3
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(args.out_dir / "gradcheck.json", out)
    text = "\n".join(lines) + f"\n{'PASS' if ok else 'FAIL'}\n"
    (args.out_dir / "gradcheck.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0 if ok else 1


def cmd_dump_attention(args) -> int:
    from . import plotting
    from .probe import Checkpoint, dump_attention

    checkpoint = Checkpoint.load(args.checkpoint)
    examples = read_corpus(args.corpus)
    if not 0 <= args.index < len(examples):
        raise ConfigError(f"--index {args.index} outside corpus of {len(examples)} sentences")
    dump = dump_attention(checkpoint, examples[args.index])
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(args.out_dir / "attention.json", dump)
    for layer in dump["layers"]:
        plotting.attention_heatmaps(dump, args.out_dir / f"attention-layer{layer['layer']}.png", layer["layer"])
    print(f"wrote attention maps for {len(dump['layers'])} layers to {args.out_dir}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "matrix": cmd_matrix,
    "gradcheck": cmd_gradcheck,
    "dump-attention": cmd_dump_attention,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "schema":
        print(cfg.schema_text(), end="")
        return 0
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as err:
        print(f"mgsa {args.command}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
