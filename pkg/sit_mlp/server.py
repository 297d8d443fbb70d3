"""
SiT-MLP MCP Server
Run with: sit-mlp serve  (or python -m sit_mlp serve)

Exposes the library as MCP tools over stdio:
- Model inspection (parameter / FLOP tables)
- Gradient check suite
- Synthetic dataset generation
- Checkpoint evaluation and score ensembling
- Learning-rate schedule preview
"""

import asyncio
import json
import logging
from typing import Any, Dict

from mcp.server import Server
from mcp.server.stdio import stdio_server
from mcp.types import TextContent, Tool

from .config import ModelConfig, TrainConfig, config_from_dict, load_config
from .errors import SitMlpError

logger = logging.getLogger(__name__)

# Create MCP server
app = Server("sit-mlp")


TOOLS = [
    Tool(
        name="inspect_model",
        description="Parameter and FLOP tables of a model config (defaults to the NTU-shaped config)",
        inputSchema={
            "type": "object",
            "properties": {
                "config_path": {
                    "type": "string",
                    "description": "Path to a TOML config"
                },
                "model": {
                    "type": "object",
                    "description": "Model config overrides, e.g. {\"base_channels\": 64}"
                }
            }
        }
    ),
    Tool(
        name="run_gradcheck",
        description="Run the finite-difference gradient suite on tiny 64-bit instances",
        inputSchema={
            "type": "object",
            "properties": {
                "quick": {
                    "type": "boolean",
                    "description": "Sample fewer coordinates per tensor (default: true)"
                }
            }
        }
    ),
    Tool(
        name="generate_dataset",
        description="Write a synthetic skeleton dataset and report the nearest-centroid oracle accuracy",
        inputSchema={
            "type": "object",
            "properties": {
                "out_dir": {"type": "string", "description": "Output directory"},
                "classes": {"type": "integer", "description": "Number of classes (>= 2)"},
                "per_class": {"type": "integer", "description": "Samples per class"},
                "joints": {"type": "integer", "description": "Joints per skeleton (default: 25)"},
                "frames": {"type": "integer", "description": "Frames per sample (default: 64)"},
                "seed": {"type": "integer", "description": "Generator seed (default: 0)"}
            },
            "required": ["out_dir", "classes", "per_class"]
        }
    ),
    Tool(
        name="evaluate_checkpoint",
        description="Evaluate a checkpoint on a dataset split; optionally write the score CSV",
        inputSchema={
            "type": "object",
            "properties": {
                "checkpoint": {"type": "string", "description": "Path to a .ckpt file"},
                "data_dir": {"type": "string", "description": "Dataset directory"},
                "split": {"type": "string", "description": "Manifest name (default: test)"},
                "scores_path": {"type": "string", "description": "Where to write the score CSV"}
            },
            "required": ["checkpoint", "data_dir"]
        }
    ),
    Tool(
        name="ensemble_scores",
        description="Weighted ensemble of per-modality score CSV files",
        inputSchema={
            "type": "object",
            "properties": {
                "score_files": {"type": "array", "items": {"type": "string"}},
                "weights": {"type": "array", "items": {"type": "number"}}
            },
            "required": ["score_files"]
        }
    ),
    Tool(
        name="lr_schedule",
        description="Learning rate at each requested epoch (warmup + cosine annealing)",
        inputSchema={
            "type": "object",
            "properties": {
                "train": {"type": "object", "description": "Train config overrides"},
                "epochs": {"type": "array", "items": {"type": "number"},
                           "description": "Epochs to evaluate (default: 0..epochs)"}
            }
        }
    ),
]


@app.list_tools()
async def list_tools() -> list[Tool]:
    """List available tools"""
    return TOOLS


def _inspect_model(arguments: Dict[str, Any]) -> Dict[str, Any]:
    from .network import build_model, model_summary

    base = ModelConfig()
    if arguments.get("config_path"):
        base, _ = load_config(arguments["config_path"])
    cfg, _ = config_from_dict({"model": {**base.to_dict(), **(arguments.get("model") or {})}})
    return {"success": True, **model_summary(build_model(cfg))}


def _run_gradcheck(arguments: Dict[str, Any]) -> Dict[str, Any]:
    from .gradcheck import run_gradcheck_suite

    cases = run_gradcheck_suite(quick=arguments.get("quick", True))
    return {
        "success": all(c.passed for c in cases),
        "cases": [
            {"name": c.name, "max_error": c.max_error, "checked": c.checked,
             "skipped": c.skipped, "passed": c.passed}
            for c in cases
        ],
    }


def _generate_dataset(arguments: Dict[str, Any]) -> Dict[str, Any]:
    from .data.synthetic import synth_generate

    for key in ("out_dir", "classes", "per_class"):
        if key not in arguments:
            raise ValueError(f"Missing '{key}' parameter")
    result = synth_generate(
        arguments["out_dir"],
        num_classes=int(arguments["classes"]),
        samples_per_class=int(arguments["per_class"]),
        joints=int(arguments.get("joints", 25)),
        frames=int(arguments.get("frames", 64)),
        seed=int(arguments.get("seed", 0)),
        quiet=True,
    )
    return {
        "success": True,
        "root": str(result.root),
        "train_samples": len(result.train),
        "test_samples": len(result.test),
        "oracle_accuracy": result.oracle_accuracy,
    }


def _evaluate_checkpoint(arguments: Dict[str, Any]) -> Dict[str, Any]:
    from .checkpoint import load_model
    from .data.skeleton_io import load_split
    from .data.synthetic import load_dataset_meta
    from .evaluation import evaluate, write_scores

    for key in ("checkpoint", "data_dir"):
        if key not in arguments:
            raise ValueError(f"Missing '{key}' parameter")
    model, ckpt = load_model(arguments["checkpoint"])
    manifest = load_split(arguments["data_dir"], arguments.get("split", "test"))
    report = evaluate(model, manifest, modality=ckpt.modality,
                      num_classes=load_dataset_meta(arguments["data_dir"]).get("num_classes"))
    if arguments.get("scores_path"):
        write_scores(arguments["scores_path"], report)
    return {"success": True, "modality": ckpt.modality, **report.to_dict()}


def _ensemble_scores(arguments: Dict[str, Any]) -> Dict[str, Any]:
    from .evaluation import ensemble

    files = arguments.get("score_files") or []
    if not files:
        raise ValueError("No score files provided")
    report = ensemble(files, arguments.get("weights"))
    return {"success": True, **report.to_dict()}


def _lr_schedule(arguments: Dict[str, Any]) -> Dict[str, Any]:
    from .training import lr_at

    cfg = TrainConfig(**(arguments.get("train") or {}))
    epochs = arguments.get("epochs")
    if epochs is None:
        epochs = list(range(cfg.epochs + 1))
    return {"success": True, "schedule": [{"epoch": e, "lr": lr_at(cfg, e)} for e in epochs]}


HANDLERS = {
    "inspect_model": _inspect_model,
    "run_gradcheck": _run_gradcheck,
    "generate_dataset": _generate_dataset,
    "evaluate_checkpoint": _evaluate_checkpoint,
    "ensemble_scores": _ensemble_scores,
    "lr_schedule": _lr_schedule,
}


def dispatch_tool(name: str, arguments: Dict[str, Any]) -> Dict[str, Any]:
    """Run one tool; library errors become {"success": false, "error": ...}"""
    handler = HANDLERS.get(name)
    if handler is None:
        return {"success": False, "error": f"Unknown tool: {name}"}
    try:
        return handler(arguments or {})
    except (SitMlpError, ValueError, TypeError) as e:
        logger.debug(f"Tool {name} failed: {e}")
        return {"success": False, "error": str(e)}


@app.call_tool()
async def call_tool(name: str, arguments: dict) -> list[TextContent]:
    """Handle tool calls"""
    try:
        result = await asyncio.to_thread(dispatch_tool, name, arguments)
    except Exception as e:
        result = {"success": False, "error": str(e)}
    return [TextContent(type="text", text=json.dumps(result, indent=2))]


async def main():
    """Run the server"""
    async with stdio_server() as (read_stream, write_stream):
        await app.run(
            read_stream,
            write_stream,
            app.create_initialization_options()
        )


if __name__ == "__main__":
    asyncio.run(main())
