import asyncio
import json

import numpy as np
import pytest

from sit_mlp.evaluation import report_from_scores, write_scores
from sit_mlp.server import TOOLS, call_tool, dispatch_tool, list_tools


class TestToolList:
    def test_names(self):
        tools = asyncio.run(list_tools())
        assert [t.name for t in tools] == [
            "inspect_model",
            "run_gradcheck",
            "generate_dataset",
            "evaluate_checkpoint",
            "ensemble_scores",
            "lr_schedule",
        ]

    def test_schemas_are_objects(self):
        for tool in TOOLS:
            assert tool.inputSchema["type"] == "object"


class TestDispatch:
    def test_lr_schedule(self):
        result = dispatch_tool("lr_schedule", {"train": {"epochs": 10, "warmup_epochs": 2}, "epochs": [0, 2, 10]})
        assert result["success"]
        assert [row["lr"] for row in result["schedule"]] == [0.0, 0.1, 0.0001]

    def test_inspect_model_overrides(self):
        result = dispatch_tool("inspect_model", {"model": {"joints": 4, "frames": 8, "base_channels": 6,
                                                           "heads": 2, "num_classes": 2}})
        assert result["success"]
        assert result["input_shape"] == [1, 2, 8, 4, 3]
        assert result["params"]["total"] > 0

    def test_library_errors_become_payloads(self):
        result = dispatch_tool("inspect_model", {"model": {"heads": 5}})
        assert result["success"] is False
        assert "heads" in result["error"]

    def test_unknown_tool(self):
        result = dispatch_tool("train_forever", {})
        assert result == {"success": False, "error": "Unknown tool: train_forever"}

    def test_missing_arguments(self):
        result = dispatch_tool("generate_dataset", {"classes": 2})
        assert result["success"] is False
        assert "out_dir" in result["error"]

    def test_bad_train_override(self):
        assert dispatch_tool("lr_schedule", {"train": {"momentum_typo": 1}})["success"] is False

    def test_ensemble(self, tmp_path):
        labels = np.array([0, 1, 1])
        scores = np.array([[0.8, 0.2], [0.3, 0.7], [0.6, 0.4]])
        path = tmp_path / "joint.csv"
        write_scores(path, report_from_scores(scores, labels))
        result = dispatch_tool("ensemble_scores", {"score_files": [str(path)]})
        assert result["success"]
        assert result["accuracy"] == pytest.approx(2 / 3)
        assert dispatch_tool("ensemble_scores", {"score_files": []})["success"] is False

    def test_evaluate_checkpoint(self, tmp_path, micro_dataset):
        from sit_mlp.checkpoint import save_checkpoint
        from sit_mlp.config import ModelConfig
        from sit_mlp.network import build_model

        ckpt = save_checkpoint(tmp_path / "m.ckpt", build_model(ModelConfig.micro()))
        result = dispatch_tool("evaluate_checkpoint", {"checkpoint": str(ckpt), "data_dir": str(micro_dataset.root),
                                                       "scores_path": str(tmp_path / "s.csv")})
        assert result["success"]
        assert result["num_samples"] == 8
        assert (tmp_path / "s.csv").exists()

    def test_evaluate_checkpoint_class_count_mismatch(self, tmp_path, micro_dataset):
        from sit_mlp.checkpoint import save_checkpoint
        from sit_mlp.config import ModelConfig
        from sit_mlp.network import build_model

        ckpt = save_checkpoint(tmp_path / "k3.ckpt", build_model(ModelConfig.micro(num_classes=3)))
        result = dispatch_tool("evaluate_checkpoint", {"checkpoint": str(ckpt), "data_dir": str(micro_dataset.root)})
        assert result["success"] is False
        assert "classes" in result["error"]


class TestCallTool:
    def test_returns_json_text(self):
        content = asyncio.run(call_tool("lr_schedule", {"train": {"epochs": 4, "warmup_epochs": 1}}))
        assert len(content) == 1
        assert content[0].type == "text"
        payload = json.loads(content[0].text)
        assert payload["success"]
        assert len(payload["schedule"]) == 5

    def test_error_payload(self):
        payload = json.loads(asyncio.run(call_tool("nope", {}))[0].text)
        assert payload["success"] is False
