"""CLI surface: every subcommand, manifests, reports, exit codes."""

import json
from pathlib import Path

import numpy as np
import pytest

from ttq.cli import main
from ttq.checkpoint import checkpoint_load
from ttq.model import ModelConfig, TransformerModel, model_size_bytes


REPO_CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def toy_cfg_dict(data_dir, out_dir, weight_bits=8, compress=True, epochs=1):
    return {
        "seed": 5,
        "output_dir": str(out_dir),
        "data_dir": str(data_dir),
        "model": {
            "vocab_size": 40, "hidden": 16, "ffn_dim": 32, "num_layers": 1,
            "num_heads": 2, "max_seq": 12, "num_intents": 3, "num_slots": 5,
            "compress": compress, "weight_bits": weight_bits,
            "act_bits": 32 if weight_bits == 32 else 8, "dtype": "float32",
            "emb_spec": {"d": 2, "rank": 4, "format": "ttm"},
            "attn_spec": {"d": 2, "rank": 4, "format": "tt"},
            "ffn_spec": {"d": 2, "rank": 4, "format": "tt"},
            "head_spec": {"d": 2, "rank": 4, "format": "tt"},
        },
        "train": {"learning_rate": 1e-3, "epochs": epochs, "batch_size": 16},
        "bench": {"repeats": 2, "seq_len": 8, "batch": 2},
    }


@pytest.fixture()
def corpus(tmp_path):
    data_dir = tmp_path / "data"
    code = main(["gen-data", "--out", str(data_dir), "--seed", "3",
                 "--vocab-size", "40", "--num-intents", "3", "--num-slots", "4",
                 "--num-examples", "120"])
    assert code == 0
    return data_dir


def write_cfg(tmp_path, d):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(d))
    return p


class TestGenData:
    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-data", "--out", str(a), "--seed", "7", "--num-examples", "60"]) == 0
        assert main(["gen-data", "--out", str(b), "--seed", "7", "--num-examples", "60"]) == 0
        for name in ("train.tsv", "dev.tsv", "test.tsv", "meta.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestTrainEval:
    def test_train_writes_artifacts_and_eval_reproduces(self, tmp_path, corpus):
        out = tmp_path / "run"
        cfg_path = write_cfg(tmp_path, toy_cfg_dict(corpus, out, epochs=2))
        assert main(["train", str(cfg_path)]) == 0
        assert (out / "model.ttq").exists()
        assert (out / "manifest.json").exists()
        report_lines = (out / "train_report.jsonl").read_text().strip().split("\n")
        entries = [json.loads(l) for l in report_lines]
        assert len(entries) == 2
        dev_acc = entries[-1]["dev_intent_accuracy"]
        # eval on the saved checkpoint reproduces the last reported dev metrics
        code = main(["eval", str(cfg_path), "--checkpoint", str(out / "model.ttq"),
                     "--split", "dev"])
        assert code == 0
        record = json.loads((out / "eval_report.jsonl").read_text().strip())
        assert record["intent_accuracy"] == dev_acc

    def test_manifest_contents(self, tmp_path, corpus):
        out = tmp_path / "run"
        cfg_path = write_cfg(tmp_path, toy_cfg_dict(corpus, out))
        main(["train", str(cfg_path)])
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["seed"] == 5
        assert len(manifest["config_digest"]) == 64

    def test_env_seed_override(self, tmp_path, corpus, monkeypatch):
        out = tmp_path / "run"
        cfg_path = write_cfg(tmp_path, toy_cfg_dict(corpus, out))
        monkeypatch.setenv("TTQ_SEED", "99")
        main(["train", str(cfg_path)])
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 99

    def test_int8_eval_path(self, tmp_path, corpus):
        out = tmp_path / "run"
        cfg_path = write_cfg(tmp_path, toy_cfg_dict(corpus, out, epochs=2))
        main(["train", str(cfg_path)])
        code = main(["eval", str(cfg_path), "--checkpoint", str(out / "model.ttq"),
                     "--split", "dev", "--int8"])
        assert code == 0
        record = json.loads((out / "eval_report.jsonl").read_text().strip())
        assert record["mode"] == "infer_int"
        assert 0.0 <= record["intent_accuracy"] <= 1.0


class TestDistillCommand:
    def test_distill_runs_from_teacher_checkpoint(self, tmp_path, corpus):
        teacher_out = tmp_path / "teacher"
        t_cfg = write_cfg(tmp_path, toy_cfg_dict(corpus, teacher_out, weight_bits=32,
                                                 compress=False, epochs=3))
        assert main(["train", str(t_cfg)]) == 0
        student_out = tmp_path / "student"
        d = toy_cfg_dict(corpus, student_out, weight_bits=8, epochs=1)
        d["distill"] = {"stage_epochs": 1, "final_epochs": 1, "stage_lr": 1e-3,
                        "final_lr": 1e-3, "batch_size": 16,
                        "teacher_checkpoint": str(teacher_out / "model.ttq")}
        s_cfg = tmp_path / "student.json"
        s_cfg.write_text(json.dumps(d))
        assert main(["distill", str(s_cfg)]) == 0
        report = json.loads((student_out / "distill_report.json").read_text())
        assert len(report["stages"]) == 1 + 1 + 1  # stage 0, stage 1, final
        assert (student_out / "student.ttq").exists()

    def test_compare_flag_writes_side_by_side_report(self, tmp_path, corpus):
        teacher_out = tmp_path / "teacher"
        t_cfg = write_cfg(tmp_path, toy_cfg_dict(corpus, teacher_out, weight_bits=32,
                                                 compress=False, epochs=1))
        main(["train", str(t_cfg)])
        student_out = tmp_path / "student"
        d = toy_cfg_dict(corpus, student_out, weight_bits=8)
        d["distill"] = {"stage_epochs": 1, "final_epochs": 1,
                        "teacher_checkpoint": str(teacher_out / "model.ttq"),
                        "batch_size": 16}
        s_cfg = tmp_path / "student.json"
        s_cfg.write_text(json.dumps(d))
        assert main(["distill", str(s_cfg), "--compare"]) == 0
        rep = json.loads((student_out / "compare_report.json").read_text())
        tr = rep["loss_trajectories"]
        assert len(tr["layer_by_layer"]) == len(tr["all_at_once"])


class TestReports:
    def test_report_size_machine_readable_roundtrip(self, tmp_path, corpus):
        out = tmp_path / "run"
        cfg_path = write_cfg(tmp_path, toy_cfg_dict(corpus, out, weight_bits=4))
        assert main(["report-size", str(cfg_path)]) == 0
        rec = json.loads((out / "size_report.jsonl").read_text().strip())
        cfg = ModelConfig.from_dict(json.loads(cfg_path.read_text())["model"])
        model = TransformerModel(cfg, 5)
        assert rec["bytes"] == model_size_bytes(model).bytes

    def test_atis_shaped_int2_close_to_int4(self, tmp_path, monkeypatch):
        records = {}
        for name in ("int2", "int4"):
            cfg = json.loads((REPO_CONFIGS / f"atis_shaped_{name}.json").read_text())
            cfg["output_dir"] = str(tmp_path / name)
            p = tmp_path / f"{name}.json"
            p.write_text(json.dumps(cfg))
            assert main(["report-size", str(p)]) == 0
            records[name] = json.loads((tmp_path / name / "size_report.jsonl").read_text().strip())
        assert records["int2"]["bytes"] <= 1.15 * records["int4"]["bytes"]

    def test_report_flops(self, tmp_path, corpus):
        out = tmp_path / "run"
        cfg_path = write_cfg(tmp_path, toy_cfg_dict(corpus, out))
        assert main(["report-flops", str(cfg_path), "--seq-len", "8"]) == 0
        rec = json.loads((out / "flops_report.jsonl").read_text().strip())
        assert rec["flops"] > 0 and rec["flops_dense"] > rec["flops"]

    def test_bench_records_without_assertions(self, tmp_path, corpus):
        out = tmp_path / "run"
        cfg_path = write_cfg(tmp_path, toy_cfg_dict(corpus, out))
        assert main(["bench", str(cfg_path), "--repeats", "2"]) == 0
        lines = (out / "bench_report.jsonl").read_text().strip().split("\n")
        recs = [json.loads(l) for l in lines]
        assert {r["model"] for r in recs} == {"dense", "tensor_compressed"}
        for r in recs:
            assert r["mean_s"] > 0


class TestErrorPaths:
    def test_missing_config_exit_code(self, capsys):
        assert main(["train", "/nonexistent/config.json"]) == 2

    def test_bad_json_exit_code(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert main(["train", str(p)]) == 2

    def test_missing_data_dir_exit_code(self, tmp_path):
        cfg = toy_cfg_dict(tmp_path / "missing", tmp_path / "out")
        del cfg["data_dir"]
        p = write_cfg(tmp_path, cfg)
        assert main(["train", str(p)]) == 2

    def test_corrupt_checkpoint_exit_code(self, tmp_path, corpus):
        out = tmp_path / "run"
        cfg_path = write_cfg(tmp_path, toy_cfg_dict(corpus, out))
        main(["train", str(cfg_path)])
        ckpt = out / "model.ttq"
        raw = bytearray(ckpt.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        ckpt.write_bytes(bytes(raw))
        assert main(["eval", str(cfg_path), "--checkpoint", str(ckpt)]) == 5
