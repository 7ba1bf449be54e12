import json

import pytest
import yaml

import pipeline
from pipeline import main
from search import read_dataset
from tasks import read_corpus

SMALL = {
    "seed": 3,
    "counter": {"num_layers": 6, "hidden_dim": 14, "roles": "NFRFFF"},
    "routing": {"windows": 4, "hidden": 8},
    "search": {"simulations": 20},
    "train": {"epochs": 2, "batch_size": 8, "micro_batch_size": 8, "warmup_steps": 2, "heldout_fraction": 0.2},
    "tasks": {"eval_scale": 0.5, "min_default_solve_rate": 0.5,
              "sizes": {"A1": 6, "A2": 6, "D1": 4, "D2": 4, "D3": 6, "D4": 6, "D5": 6}},
    "eval": {"p_grid": [-1.0, -0.5, 0.0, 1.0], "ablation_windows": [1, 2]},
}


def _config(path, run_dir, **changes):
    data = dict(SMALL, out=str(run_dir), **changes)
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return str(path)


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    run_dir = base / "run"
    config = _config(base / "small.yaml", run_dir)
    assert main(["all", "--config", config, "--ood"]) == 0
    return config, run_dir


def test_unknown_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["tasks", "--bogus"])
    assert exc.value.code == 2


def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["deploy"])
    assert exc.value.code == 2


def test_bad_config_exits_2(tmp_path):
    config = _config(tmp_path / "bad.yaml", tmp_path / "run", search={"simulations": 0})
    assert main(["tasks", "--config", config]) == 2


def test_bad_p_grid_exits_2(tmp_path):
    config = _config(tmp_path / "cfg.yaml", tmp_path / "run")
    assert main(["sweep", "--config", config, "--p-grid", "0.5,abc"]) == 2
    assert main(["sweep", "--config", config, "--p-grid", "0.5,3"]) == 2


def test_missing_inputs_exit_3(tmp_path):
    config = _config(tmp_path / "cfg.yaml", tmp_path / "empty")
    assert main(["train", "--config", config]) == 3
    assert main(["eval", "--config", config]) == 3


def test_count_without_stratum_exits_2(tmp_path):
    config = _config(tmp_path / "cfg.yaml", tmp_path / "run")
    assert main(["tasks", "--config", config, "--count", "5"]) == 2


def test_single_stratum_to_a_file(tmp_path):
    target = tmp_path / "d3.jsonl"
    assert main(["tasks", "gen", "--stratum", "D3", "--seed", "7", "--count", "5", "--out", str(target)]) == 0
    instances = read_corpus(target)
    assert len(instances) == 5 and {i.stratum for i in instances} == {"D3"}
    assert (tmp_path / "effective_config.yaml").exists()


def test_search_to_a_file_writes_stats_beside_it(tmp_path):
    run_dir = tmp_path / "run"
    config = _config(tmp_path / "cfg.yaml", run_dir)
    assert main(["tasks", "--config", config]) == 0
    assert main(["pretrain", "--config", config]) == 0
    target = tmp_path / "out" / "d.jsonl"
    assert main(["search", "--config", config, "--stratum", "D4", "--out", str(target)]) == 0
    assert {ex.stratum for ex in read_dataset(target)} <= {"D4"}
    stats = (tmp_path / "out" / "d_stats.csv").read_text(encoding="utf-8").splitlines()
    assert stats[0].startswith("stratum,") and stats[1].startswith("D4,")


def test_full_run_artifacts(full_run):
    _, run_dir = full_run
    for name in ("effective_config.yaml", "backbone.ckpt", "dataset.jsonl", "stats.csv", "routers.ckpt",
                 "train_log.csv", "heldout_ids.json", "report.json", "ood_report.json",
                 "analysis/usage_heatmap.csv", "analysis/usage_heatmap.svg", "analysis/depth_groups.json",
                 "analysis/label_distribution.csv", "analysis/training_curves.svg",
                 "analysis/ablation_windows.csv", "analysis/ablation_loss.csv", "analysis/ablation_input.csv",
                 "sweep/control.csv", "sweep/histogram.csv", "sweep/control.svg"):
        assert (run_dir / name).exists(), name
    assert len((run_dir / "train_log.csv").read_text(encoding="utf-8").splitlines()) == 3
    control = (run_dir / "sweep" / "control.csv").read_text(encoding="utf-8").splitlines()
    assert len(control) == 5


def test_reports(full_run):
    _, run_dir = full_run
    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    assert report["default_layers"] == 6
    assert 0.0 <= report["accuracy"] <= 1.0
    assert set(report["per_stratum"]) <= {"A1", "A2", "D1", "D2", "D3", "D4", "D5"}
    ood = json.loads((run_dir / "ood_report.json").read_text(encoding="utf-8"))
    assert ood["train_family"] == "D" and ood["eval_family"] == "A"
    assert ood["delta"] == pytest.approx(ood["out_of_domain"]["accuracy"] - ood["out_of_domain"]["default_accuracy"])


def test_rerun_is_byte_identical(full_run):
    config, run_dir = full_run
    before = _snapshot(run_dir)
    assert main(["all", "--config", config, "--ood"]) == 0
    after = _snapshot(run_dir)
    assert sorted(before) == sorted(after)
    for name in before:
        assert before[name] == after[name], name


def test_worker_count_does_not_change_the_dataset(full_run, tmp_path):
    config, run_dir = full_run
    target = tmp_path / "threaded.jsonl"
    assert main(["search", "--config", config, "--workers", "3", "--out", str(target)]) == 0
    assert target.read_bytes() == (run_dir / "dataset.jsonl").read_bytes()


@pytest.mark.slow
def test_routing_never_degrades_and_saves_layers(tmp_path):
    config = _config(tmp_path / "desk.yaml", tmp_path / "run",
                     counter={"num_layers": 8, "hidden_dim": 32, "roles": "NNFRRFFF"},
                     routing={"windows": 8, "hidden": 64},
                     search={"simulations": 50},
                     train={"epochs": 25, "lr_max": 3.0e-3, "warmup_steps": 100},
                     tasks={"eval_scale": 0.25,
                            "sizes": {"A1": 300, "A2": 300, "D1": 200, "D2": 300, "D3": 400, "D4": 400, "D5": 500}})
    for step in ("tasks", "pretrain", "search", "train", "eval"):
        assert main([step, "--config", config, "--workers", "4"]) == 0
    assert len(read_dataset(tmp_path / "run" / "dataset.jsonl")) >= 2000
    report = json.loads((tmp_path / "run" / "report.json").read_text(encoding="utf-8"))
    assert report["accuracy"] >= report["default_accuracy"] - 0.005
    assert report["avg_executed_layers"] <= 8 - 0.5


def test_pretraining_above_loss_threshold_exits_4(tmp_path):
    run_dir = tmp_path / "run"
    config = _config(tmp_path / "cfg.yaml", run_dir,
                     backbone={"kind": "transformer"},
                     transformer={"num_layers": 4, "hidden_dim": 8, "heads": 2, "ffn_dim": 16, "max_seq_len": 24},
                     pretrain={"steps": 2, "batch_size": 4, "warmup_steps": 0, "corpus_size": 40,
                               "max_heldout_loss": 1.0e-3})
    assert main(["tasks", "--config", config]) == 0
    assert main(["pretrain", "--config", config]) == 4
    assert not (run_dir / "backbone.ckpt").exists()


def test_search_refuses_a_backbone_below_the_a1_solve_rate(tmp_path):
    run_dir = tmp_path / "run"
    config = _config(tmp_path / "cfg.yaml", run_dir,
                     tasks={"sizes": {"A1": 1000}, "min_default_solve_rate": 1.0})
    assert main(["tasks", "--config", config]) == 0
    assert main(["pretrain", "--config", config]) == 0
    assert main(["search", "--config", config]) == 4
    assert not (run_dir / "dataset.jsonl").exists()


@pytest.mark.parametrize("error, code", [
    (FloatingPointError("overflow in exp"), 4),
    (OverflowError("math range error"), 4),
    (PermissionError("run directory is read-only"), 3),
    (UnicodeDecodeError("utf-8", b"\xff", 0, 1, "invalid start byte"), 3),
])
def test_runtime_errors_map_to_exit_codes(tmp_path, monkeypatch, error, code):
    def failing(config, out_dir, args):
        raise error

    monkeypatch.setitem(pipeline.RUNNERS, "tasks", failing)
    config = _config(tmp_path / "cfg.yaml", tmp_path / "run")
    assert main(["tasks", "--config", config]) == code
