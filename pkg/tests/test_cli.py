import json

import pytest

from nerfdistill.cli import main
from nerfdistill.config import ConfigError
from nerfdistill.runconfig import RUN_SCHEMA_VERSION, load_run_config, parse_run_config
from nerfdistill.teacher import load_checkpoint

from conftest import tiny_teacher_config


def tiny_run_config(**train) -> dict:
    base = dict(batch_size=4, total_steps=6, stage1_steps=3, cache_size=8, real_pool_size=8, render_batch=8,
                probe_size=4, probe_every=3, log_every=1, disc_channels=4, r1_interval=2, checkpoint_every=3)
    base.update(train)
    return {
        "schema_version": RUN_SCHEMA_VERSION,
        "teacher": tiny_teacher_config().to_dict(),
        "student": {"style_dim": 16, "mapping_layers": 2, "channel_base": 64, "channel_max": 16},
        "train": base,
        "eval": {"num_samples": 8, "regressor_samples": 32, "regressor_epochs": 2, "kid_subsets": 2,
                 "kid_subset_size": 4, "batch": 8},
        "bench": {"batches": [1, 2], "memory_budget_mb": 1024, "repeats": 5, "warmup": 1, "threads": 1},
    }


def write_config(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "run.json", tiny_run_config())
    assert main(["make-teacher", "--config", cfg, "--out-dir", str(root / "teacher")]) == 0
    return root, cfg, root / "teacher" / "teacher.ckpt"


@pytest.fixture(scope="module")
def distilled(workspace):
    root, cfg, teacher = workspace
    out = root / "distill"
    assert main(["distill", "--config", cfg, "--teacher", str(teacher), "--out-dir", str(out)]) == 0
    return out


class TestRunConfig:
    def test_defaults_round_trip(self):
        cfg = parse_run_config(tiny_run_config())
        assert parse_run_config(cfg.to_dict()).to_dict() == cfg.to_dict()
        assert load_run_config(None).schema_version == RUN_SCHEMA_VERSION

    def test_unknown_key_rejected(self):
        data = tiny_run_config()
        data["train"]["learning_rate"] = 1.0
        with pytest.raises(ConfigError, match="learning_rate"):
            parse_run_config(data)

    def test_unknown_student_key_rejected(self):
        data = tiny_run_config()
        data["student"]["depth"] = 3
        with pytest.raises(ConfigError):
            parse_run_config(data)

    def test_schema_version_checked(self):
        with pytest.raises(ConfigError, match="schema_version"):
            parse_run_config({"schema_version": RUN_SCHEMA_VERSION + 1})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(str(tmp_path / "nope.json"))


class TestCommands:
    def test_make_teacher(self, workspace):
        _, _, teacher = workspace
        model = load_checkpoint(teacher)
        assert model.config.to_dict() == tiny_teacher_config().to_dict()

    def test_make_teacher_seed_override(self, workspace, tmp_path):
        _, cfg, _ = workspace
        assert main(["make-teacher", "--config", cfg, "--seed", "7", "--out-dir", str(tmp_path)]) == 0
        assert load_checkpoint(tmp_path / "teacher.ckpt").config.seed == 7

    def test_distill_outputs(self, distilled):
        events = read_jsonl(distilled / "metrics.jsonl")
        kinds = [e["event"] for e in events]
        assert kinds[0] == "start" and kinds[-1] == "final" and kinds.count("transition") == 1
        assert (distilled / "student.ckpt").is_file()
        assert (distilled / "checkpoints" / "last.ckpt").is_file()
        assert hasattr(load_checkpoint(distilled / "student.ckpt"), "student")

    def test_distill_stage1_only_never_logs_d(self, workspace, tmp_path):
        root, _, teacher = workspace
        cfg = write_config(tmp_path / "s1.json", tiny_run_config(stage1_steps=6))
        assert main(["distill", "--config", cfg, "--teacher", str(teacher), "--out-dir", str(tmp_path)]) == 0
        events = read_jsonl(tmp_path / "metrics.jsonl")
        assert not any(e["event"] == "transition" for e in events)
        assert not any(k.startswith("d_") for e in events for k in e)

    def test_distill_rejects_student_as_teacher(self, workspace, distilled, tmp_path):
        _, cfg, _ = workspace
        rc = main(["distill", "--config", cfg, "--teacher", str(distilled / "student.ckpt"),
                   "--out-dir", str(tmp_path)])
        assert rc == 2

    def test_render_writes_dataset(self, distilled, tmp_path):
        assert main(["render", "--model", str(distilled / "student.ckpt"), "--poses", "orbit:3",
                     "--out-dir", str(tmp_path)]) == 0
        labels = json.loads((tmp_path / "dataset.json").read_text())["labels"]
        assert [name for name, _ in labels] == ["view_000.png", "view_001.png", "view_002.png"]
        assert main(["ingest", "--root", str(tmp_path)]) == 0

    def test_render_bad_poses(self, workspace, tmp_path):
        _, _, teacher = workspace
        assert main(["render", "--model", str(teacher), "--poses", "spiral", "--out-dir", str(tmp_path)]) == 2

    def test_eval_teacher_psnr_capped(self, workspace, tmp_path):
        _, cfg, teacher = workspace
        assert main(["eval", "--config", cfg, "--model", str(teacher), "--metric", "psnr",
                     "--out-dir", str(tmp_path)]) == 0
        assert main(["eval", "--config", cfg, "--model", str(teacher), "--metric", "psnr",
                     "--out-dir", str(tmp_path)]) == 0
        rows = read_jsonl(tmp_path / "metrics.jsonl")
        assert len(rows) == 2 and all(r["value"] == 99.0 for r in rows)
        assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 3

    def test_eval_student_fid(self, workspace, distilled, tmp_path):
        _, cfg, _ = workspace
        assert main(["eval", "--config", cfg, "--model", str(distilled / "student.ckpt"), "--metric", "fid",
                     "--metric", "kid", "--out-dir", str(tmp_path)]) == 0
        rows = read_jsonl(tmp_path / "metrics.jsonl")
        assert [r["metric"] for r in rows] == ["fid", "kid"]

    def test_bench(self, workspace, distilled, tmp_path):
        _, cfg, teacher = workspace
        assert main(["bench", "--config", cfg, "--teacher", str(teacher), "--student",
                     str(distilled / "student.ckpt"), "--batches", "1", "--out-dir", str(tmp_path)]) == 0
        for name in ("bench.csv", "bench.jsonl", "bench.png"):
            assert (tmp_path / name).is_file()

    def test_ingest_bad_manifest(self, tmp_path):
        (tmp_path / "dataset.json").write_text(json.dumps([["a.png", [0.0] * 24]]))
        assert main(["ingest", "--root", str(tmp_path)]) == 2

    def test_bad_config_exit_code(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json", {"train": {"batch_size": 0}})
        assert main(["make-teacher", "--config", cfg, "--out-dir", str(tmp_path)]) == 2
        assert "error" in capsys.readouterr().err
