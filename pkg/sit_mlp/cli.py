"""
Command line entry point: `sit-mlp <command>` or `python -m sit_mlp <command>`.

Commands: generate, train, eval, ensemble, inspect, gradcheck, export-attn, serve.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import ModelConfig, TrainConfig, load_config, with_overrides
from .data import ModalityKind, SkeletonGraph
from .errors import ConfigError, SitMlpError

logger = logging.getLogger(__name__)


def _graph_for_data(data_dir: Path) -> Optional[SkeletonGraph]:
    from .data.skeleton_io import read_graph

    path = data_dir / "graph.tsv"
    return read_graph(path) if path.exists() else None


def _parse_weights(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(w) for w in text.split(",") if w.strip()]
    except ValueError:
        raise ConfigError(f"--weights expects comma-separated numbers, got {text!r}") from None


def _print_table(title: str, items, total_label: str, total: int):
    print(title)
    width = max([len(name) for name in items] + [len(total_label)])
    for name, value in items.items():
        print(f"  {name:<{width}}  {value:>14,}")
    print(f"  {total_label:<{width}}  {total:>14,}")


# ============================================================
# Commands
# ============================================================

def cmd_generate(args) -> int:
    from .data.synthetic import synth_generate

    result = synth_generate(
        args.out,
        num_classes=args.classes,
        samples_per_class=args.per_class,
        joints=args.joints,
        frames=args.frames,
        persons=args.persons,
        seed=args.seed,
        verify=not args.no_verify,
        quiet=args.quiet,
    )
    print(json.dumps({
        "root": str(result.root),
        "train_samples": len(result.train),
        "test_samples": len(result.test),
        "oracle_accuracy": result.oracle_accuracy,
    }, indent=2))
    return 0


def cmd_train(args) -> int:
    from .data.skeleton_io import load_split
    from .data.synthetic import load_dataset_meta
    from .network import build_model
    from .training import fit

    if args.config:
        model_cfg, train_cfg = load_config(args.config)
    else:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    train_cfg = with_overrides(train_cfg, epochs=args.epochs, seed=args.seed, batch_size=args.batch_size,
                               workers=args.workers)
    model_cfg = with_overrides(model_cfg, seed=args.seed)

    data_dir = Path(args.data)
    meta = load_dataset_meta(data_dir)
    for key in ("joints", "coord_dim"):
        if key in meta and meta[key] != getattr(model_cfg, key):
            raise ConfigError(f"Dataset {key}={meta[key]} does not match model {key}={getattr(model_cfg, key)}")
    if meta.get("num_classes", 0) > model_cfg.num_classes:
        raise ConfigError(f"Dataset has {meta['num_classes']} classes, model predicts {model_cfg.num_classes}")

    graph = _graph_for_data(data_dir)
    manifest = load_split(data_dir, args.split)
    model = build_model(model_cfg, graph)
    result = fit(model, manifest, train_cfg, args.out, args.modality, graph, quiet=args.quiet)
    last = result.history[-1]
    print(json.dumps({
        "run_dir": str(result.run_dir),
        "epochs": len(result.history),
        "final_loss": last.loss,
        "final_acc": last.acc,
        "best_loss": result.best_loss,
    }, indent=2))
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_model
    from .data.skeleton_io import load_split
    from .data.synthetic import load_dataset_meta
    from .evaluation import evaluate, write_scores

    model, ckpt = load_model(args.ckpt)
    data_dir = Path(args.data)
    manifest = load_split(data_dir, args.split)
    report = evaluate(model, manifest, batch_size=args.batch_size, modality=ckpt.modality,
                      graph=_graph_for_data(data_dir), workers=args.workers,
                      num_classes=load_dataset_meta(data_dir).get("num_classes"))
    if args.scores:
        write_scores(args.scores, report)
    if args.report:
        Path(args.report).write_text(report.to_json(), encoding="utf-8")
    print(report.to_json())
    return 0


def cmd_ensemble(args) -> int:
    from .evaluation import ensemble

    report = ensemble(args.files, _parse_weights(args.weights))
    if args.report:
        Path(args.report).write_text(report.to_json(), encoding="utf-8")
    print(report.to_json())
    return 0


def cmd_inspect(args) -> int:
    from .network import build_model, model_summary

    cfg = load_config(args.config)[0] if args.config else ModelConfig()
    summary = model_summary(build_model(cfg))
    if args.json:
        print(json.dumps(summary, indent=2))
        return 0
    print(f"variant: {summary['variant']}  input: {summary['input_shape']}  "
          f"ablation: {', '.join(summary['ablation']) or 'none'}")
    _print_table("Parameters", summary["params"]["items"], "total", summary["params"]["total"])
    _print_table("FLOPs (2 x MAC)", summary["flops"]["items"], "total", summary["flops"]["total"])
    print(f"  MACs: {summary['flops']['macs'] / 1e9:.3f}G  FLOPs: {summary['flops']['total'] / 1e9:.3f}G")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck_suite

    cases = run_gradcheck_suite(quick=args.quick)
    for c in cases:
        status = "ok" if c.passed else "FAIL"
        print(f"{status:<4}  {c.name:<32}  max rel err {c.max_error:.2e}  "
              f"({c.checked} checked, {c.skipped} at kinks, {c.seconds:.2f}s)")
    failed = sum(not c.passed for c in cases)
    print(f"{len(cases) - failed}/{len(cases)} passed")
    return 0 if failed == 0 else 1


def cmd_export_attn(args) -> int:
    from .checkpoint import load_model
    from .evaluation import load_sample_for_model, sample_attention, write_attention

    model, ckpt = load_model(args.ckpt)
    sample = load_sample_for_model(model, args.sample, ckpt.modality)
    attention = sample_attention(model, sample, args.block)
    write_attention(args.out, attention, args.format)
    logger.info(f"Wrote attention {attention.shape} of block {args.block} to {args.out}")
    return 0


def cmd_serve(args) -> int:
    import asyncio

    from .server import main as serve_main

    asyncio.run(serve_main())
    return 0


# ============================================================
# Parser
# ============================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sit-mlp", description="SiT-MLP skeleton action recognition")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic skeleton dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--joints", type=int, default=25)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--persons", type=int, default=2)
    p.add_argument("--no-verify", action="store_true", help="skip the separability oracle")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one modality stream")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--modality", default="joint", choices=[m.value for m in ModalityKind])
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scores")
    p.add_argument("--report")
    p.add_argument("--split", default="test")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--workers", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="weighted ensemble of score files")
    p.add_argument("files", nargs="+")
    p.add_argument("--weights")
    p.add_argument("--report")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("inspect", help="parameter and FLOP tables")
    p.add_argument("--config")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-attn", help="export one STGU attention map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--format", default="csv", choices=["csv", "bin"])
    p.set_defaults(func=cmd_export_attn)

    p = sub.add_parser("serve", help="run the MCP tool server on stdio")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (SitMlpError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
