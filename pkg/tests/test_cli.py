import json
import os

import pytest

from effnetv2.arch import ArchSpec, get_preset
from effnetv2.cli import main
from effnetv2.trainer import Metrics


def run(capsys, *argv):
    code = main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


SMALL = ["--train-size", 256, "--epochs", 1, "--set", "dataset.eval_size=64"]


class TestInspect:
    def test_stage_table(self, capsys):
        code, out, _ = run(capsys, "inspect", "v2-s")
        assert code == 0
        lines = out.splitlines()
        assert lines[1].split() == ["Stage", "Operator", "Stride", "#Channels", "#Layers"]
        body = [line.split() for line in lines[3:]]
        assert len(body) == 8
        assert body[0] == ["0", "Conv3x3", "2", "24", "1"]
        assert body[6][-3:] == ["2", "256", "15"]
        assert body[7][-3:] == ["1", "1280", "1"]

    def test_save_round_trip(self, capsys, tmp_path):
        code, _, _ = run(capsys, "inspect", "v2-s", "--save", "s.json", "--output-dir", tmp_path)
        assert code == 0
        first = (tmp_path / "s.json").read_text()
        assert ArchSpec.from_json(first) == get_preset("v2-s")
        code, out, _ = run(capsys, "inspect", tmp_path / "s.json", "--json")
        assert code == 0 and out == first
        _, table_a, _ = run(capsys, "inspect", "v2-s")
        _, table_b, _ = run(capsys, "inspect", tmp_path / "s.json")
        assert table_a == table_b

    def test_malformed_file(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{\n  "name": "x",\n  "stages": [,]\n}')
        code, _, err = run(capsys, "inspect", bad)
        assert code == 1 and "line 3, column 14" in err

    def test_schema_violation(self, capsys, tmp_path):
        data = get_preset("nano").to_dict()
        data["stages"][0]["kernel"] = 4
        data["extra"] = 1
        (tmp_path / "a.json").write_text(json.dumps(data))
        code, _, err = run(capsys, "inspect", tmp_path / "a.json")
        assert code == 1 and "kernel" in err and "extra" in err

    def test_unknown_preset(self, capsys):
        code, _, err = run(capsys, "inspect", "v9-xl")
        assert code == 1 and "neither a preset" in err


class TestCount:
    def test_text_and_json_totals_agree(self, capsys):
        code, text, _ = run(capsys, "count", "v2-s", "--image-size", 384)
        assert code == 0
        _, js, _ = run(capsys, "count", "v2-s", "--image-size", 384, "--json")
        report = json.loads(js)
        assert f"total params: {report['params']:,}" in text
        assert f"total flops: {report['flops']:,}" in text
        assert 21e6 <= report["params"] <= 25e6
        assert 7.5e9 <= report["flops"] <= 10.1e9

    def test_fused_ratio(self, capsys):
        fused = json.loads(run(capsys, "count", "b4-fused1-7", "--json")[1])
        plain = json.loads(run(capsys, "count", "b4", "--json")[1])
        assert fused["params"] / plain["params"] == pytest.approx(6.839, rel=0.10)

    def test_bad_size(self, capsys):
        assert run(capsys, "count", "nano", "--image-size", 4)[0] == 1


class TestSchedule:
    def test_preset_plan(self, capsys):
        code, out, _ = run(capsys, "schedule", "--preset", "v2-s", "--stages", 4, "--json")
        assert code == 0
        plans = json.loads(out)["plans"]
        assert [p["image_size"] for p in plans] == [128, 184, 240, 300]
        regs = [(p["dropout"], p["randaug"], p["mixup"]) for p in plans]
        assert regs[0] == (0.1, 5.0, 0.0) and regs[-1] == (0.3, 15.0, 0.0)
        assert regs[1][0] == pytest.approx(0.1667, abs=1e-4)

    def test_text_table(self, capsys):
        code, out, _ = run(capsys, "schedule", "--preset", "v2-s", "--stages", 4, "--total-steps", 400)
        assert code == 0
        assert [line.split()[3] for line in out.splitlines()[2:]] == ["128", "184", "240", "300"]


class TestConfig:
    def test_all_problems_listed(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"bogus": 1, "seed": -1, "train": {"epochs": 0, "lr_schedule": "linear"},
                                   "dataset": {"kind": "imagenet"}}))
        code, _, err = run(capsys, "train", "--config", cfg)
        assert code == 1
        for needle in ("bogus", "seed", "epochs", "lr_schedule", "kind"):
            assert needle in err
        assert len(err.strip().splitlines()) == 5

    def test_semantic_problems_listed(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--arch", tmp_path / "missing.json", "--dataset", "cifar10",
                           "--set", "train.rmsprop_eps=0", "--output-dir", tmp_path)
        assert code == 1
        assert "missing.json" in err and "dataset.path" in err and "rmsprop_eps" in err

    def test_flags_override_file(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"seed": 3, "train": {"epochs": 1, "batch_size": 16},
                                   "dataset": {"train_size": 128, "eval_size": 32}}))
        out = tmp_path / "out"
        code, _, _ = run(capsys, "train", "--config", cfg, "--seed", 5, "--set", "train.batch_size=32",
                         "--output-dir", out)
        assert code == 0
        resolved = json.loads((out / "run_config.json").read_text())
        assert resolved["seed"] == 5 and resolved["train"]["batch_size"] == 32 and resolved["train"]["epochs"] == 1

    def test_env_output_dir(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("EFFV2_OUTPUT_DIR", str(tmp_path / "env"))
        monkeypatch.chdir(tmp_path)
        code, _, _ = run(capsys, "train", *SMALL)
        assert code == 0
        assert (tmp_path / "env" / "metrics.csv").is_file()
        assert sorted(os.listdir(tmp_path)) == ["env"]  # nothing written elsewhere

    def test_usage_error_is_validation(self, capsys):
        assert run(capsys, "train", "--epochs", "many")[0] == 1
        assert run(capsys, "frobnicate")[0] == 1

    def test_runtime_error_exit_code(self, capsys, tmp_path):
        empty = tmp_path / "cifar"
        empty.mkdir()
        code, _, err = run(capsys, "train", "--dataset", "cifar10", "--data", empty, "--output-dir", tmp_path / "o")
        assert code == 2 and "data_batch_1.bin" in err


class TestTrain:
    def test_same_seed_same_metrics(self, capsys, tmp_path):
        for name in ("a", "b"):
            assert run(capsys, "train", "--seed", 7, *SMALL, "--output-dir", tmp_path / name)[0] == 0
        a = Metrics.from_csv(tmp_path / "a" / "metrics.csv")
        b = Metrics.from_csv(tmp_path / "b" / "metrics.csv")
        assert a.deterministic() == b.deterministic()
        assert (tmp_path / "a" / "checkpoint.efv2").is_file()

    def test_resume(self, capsys, tmp_path):
        run(capsys, "train", *SMALL, "--output-dir", tmp_path / "full")
        run(capsys, "train", *SMALL, "--output-dir", tmp_path / "cut", "--max-steps", 2)
        assert len(Metrics.from_csv(tmp_path / "cut" / "metrics.csv").rows) == 2
        assert run(capsys, "train", *SMALL, "--output-dir", tmp_path / "cut", "--resume")[0] == 0
        full = Metrics.from_csv(tmp_path / "full" / "metrics.csv")
        cut = Metrics.from_csv(tmp_path / "cut" / "metrics.csv")
        assert full.deterministic() == cut.deterministic()

    def test_resume_without_checkpoint(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", *SMALL, "--output-dir", tmp_path, "--resume")
        assert code == 1 and "no checkpoint" in err

    def test_progressive_mode(self, capsys, tmp_path):
        code, _, _ = run(capsys, "train", *SMALL, "--epochs", 2, "--schedule-mode", "progressive_adaptive",
                         "--stages", 2, "--size-min", 16, "--size-max", 32, "--output-dir", tmp_path)
        assert code == 0
        sizes = Metrics.from_csv(tmp_path / "metrics.csv").column("image_size")
        assert sizes[0] == 16 and sizes[-1] == 32


class TestNasAndExport:
    def test_budget_one(self, capsys, tmp_path):
        code, out, _ = run(capsys, "nas", "--budget", 1, "--epochs", 0.5, "--image-size", 16, "--train-size", 128,
                           "--set", "nas.timing_repeats=1", "--output-dir", tmp_path)
        assert code == 0
        trace = (tmp_path / "trace.jsonl").read_text().splitlines()
        assert len(trace) == 1
        pareto = json.loads((tmp_path / "pareto.json").read_text())
        assert len(pareto["front"]) == 1 and pareto["best"] == 0
        assert "Pareto front (1)" in out

        code, _, _ = run(capsys, "export", tmp_path / "trace.jsonl", "--format", "csv", "--output-dir", tmp_path)
        header = (tmp_path / "trace_export.csv").read_text().splitlines()[0].split(",")
        assert code == 0 and header[:2] == ["index", "arch"] and {"A", "S", "P", "reward"} <= set(header)

    def test_export_metrics_json(self, capsys, tmp_path):
        run(capsys, "train", *SMALL, "--output-dir", tmp_path)
        code, _, _ = run(capsys, "export", tmp_path / "metrics.csv", "--columns", "step,minival_acc",
                         "--drop-empty", "--output-dir", tmp_path)
        assert code == 0
        data = json.loads((tmp_path / "metrics_export.json").read_text())
        assert set(data["columns"]) == {"step", "minival_acc"}
        assert data["rows"] == len(data["columns"]["step"]) >= 1
        assert all(isinstance(v, float) for v in data["columns"]["minival_acc"])

    def test_export_refuses_to_overwrite_source(self, capsys, tmp_path):
        src = tmp_path / "m.csv"
        src.write_text("step\n0\n")
        code, _, err = run(capsys, "export", src, "--format", "csv", "--out", src)
        assert code == 1 and "overwrite" in err

    def test_export_unknown_column(self, capsys, tmp_path):
        src = tmp_path / "m.csv"
        src.write_text("step\n0\n")
        assert run(capsys, "export", src, "--columns", "nope", "--output-dir", tmp_path)[0] == 1
