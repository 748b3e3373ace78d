from pathlib import Path

import pytest

from main import EXIT_ERROR, EXIT_OK, EXIT_VALIDATION, main
from src.core.env import TaskId
from src.core.errors import UsageError
from src.core.experiments import (arm_name, exploration_count, generate_datasets, holdout_split, merge_reports,
                                  train_flaky)
from src.utils.config import save_config, with_overrides
from src.utils.io import read_csv, read_json, read_jsonl


def _config_file(tmp_path, config, name="config.json"):
    return str(save_config(config, tmp_path / name))


def _run(config_path, *args):
    return main([*args, "--config", config_path])


def test_arm_names():
    assert arm_name("storm", 0) == "storm"
    assert arm_name("storm", 2, "simulator") == "storm+sim@flaky2"
    assert arm_name("reactive", 1, "simulator") == "reactive@flaky1"


def test_train_flaky_every_fourth_variation():
    assert [train_flaky(v) for v in range(8)] == [0, 0, 0, 1, 0, 0, 0, 1]


def test_exploration_count():
    assert exploration_count(12, 0.0) == 0
    assert exploration_count(12, 0.5) == 12
    assert exploration_count(10, 0.3) == 4
    assert exploration_count(10, 1.0) == 10


def test_holdout_split_keeps_training_data():
    train, holdout = holdout_split(20, 0.25, seed=0)
    assert len(train) == 15 and len(holdout) == 5
    assert sorted(set(train) | set(holdout)) == list(range(20))
    again, _ = holdout_split(20, 0.25, seed=0)
    assert train.tolist() == again.tolist()
    train, holdout = holdout_split(1, 0.5, seed=0)
    assert len(train) == 1 and len(holdout) == 0


def test_datasets_without_exploration(tiny_config):
    config = with_overrides(tiny_config, exploration_ratio=0.0)
    demos, transitions, stats = generate_datasets(config)
    assert stats["exploration_episodes"] == 0
    assert stats["expert_episodes"] == len(TaskId) * config.n_train_variations * 2
    assert {t["source"] for t in transitions} == {"expert"}
    assert stats["mode_counts"]["left"] > 0 and stats["mode_counts"]["right"] > 0
    assert len(demos) == len(transitions)


def test_datasets_with_only_exploration(tiny_config):
    config = with_overrides(tiny_config, exploration_ratio=1.0)
    demos, transitions, stats = generate_datasets(config)
    assert demos
    assert {t["source"] for t in transitions} == {"explore"}
    assert stats["exploration_episodes"] == stats["expert_episodes"]


def test_gen_data_is_deterministic(tmp_path, tiny_config):
    first = _config_file(tmp_path, tiny_config, "a.json")
    second = _config_file(tmp_path, with_overrides(tiny_config, data_dir=str(tmp_path / "data2")), "b.json")
    assert _run(first, "gen-data") == EXIT_OK
    assert _run(second, "gen-data") == EXIT_OK
    for name in ("demos.jsonl", "transitions.jsonl"):
        assert (tmp_path / "data" / name).read_bytes() == (tmp_path / "data2" / name).read_bytes()
    manifest = read_json(tmp_path / "data" / "manifest.json")
    assert manifest["command"] == "gen-data"


def test_missing_config_is_a_validation_error(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "missing.yaml")]) == EXIT_VALIDATION


def test_invalid_config_is_a_validation_error(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("gamma: 1.5\n", encoding="utf-8")
    assert main(["gen-data", "--config", str(path)]) == EXIT_VALIDATION


def test_non_string_log_level_is_a_validation_error(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("logging:\n  level: 3\n", encoding="utf-8")
    assert main(["gen-data", "--config", str(path)]) == EXIT_VALIDATION


def test_eval_before_training_fails(tmp_path, tiny_config):
    assert _run(_config_file(tmp_path, tiny_config), "eval", "--mode", "reactive") == EXIT_ERROR


def test_unknown_task_is_a_validation_error(tmp_path, tiny_config):
    assert _run(_config_file(tmp_path, tiny_config), "eval", "--task", "juggle") == EXIT_VALIDATION


def test_negative_reward_weight_rejected(tmp_path, tiny_config):
    assert _run(_config_file(tmp_path, tiny_config), "train-worldmodel", "--reward-weight", "-1") == EXIT_VALIDATION


def test_global_option_before_subcommand(tmp_path, tiny_config):
    config_path = _config_file(tmp_path, tiny_config)
    assert main(["--seed", "5", "gen-data", "--config", config_path]) == EXIT_OK
    assert read_json(tmp_path / "data" / "manifest.json")["config"]["seed"] == 5


@pytest.mark.parametrize("command", ["train-policy", "train-worldmodel"])
def test_resumed_training_matches_uninterrupted(tmp_path, tiny_config, command):
    straight = _config_file(tmp_path, tiny_config, "straight.json")
    resumed = _config_file(tmp_path, with_overrides(tiny_config, checkpoint_dir=str(tmp_path / "ck2")), "resumed.json")
    assert _run(straight, "gen-data") == EXIT_OK

    assert _run(straight, command) == EXIT_OK
    assert _run(resumed, command, "--steps", "3") == EXIT_OK
    assert _run(resumed, command, "--resume") == EXIT_OK

    stem = "policy" if command == "train-policy" else f"world_model_r{tiny_config.lambda_reward:g}"
    a, b = tmp_path / "checkpoints", tmp_path / "ck2"
    assert (a / f"{stem}.json").read_bytes() == (b / f"{stem}.json").read_bytes()
    assert (a / f"{stem}_loss.csv").read_text(encoding="utf-8") == (b / f"{stem}_loss.csv").read_text(encoding="utf-8")
    _, rows = read_csv(b / f"{stem}_loss.csv")
    assert [int(r["step"]) for r in rows] == list(range(tiny_config.policy_train_steps))


def test_full_pipeline(tmp_path, tiny_config):
    config_path = _config_file(tmp_path, tiny_config)
    runs = tmp_path / "runs"
    assert _run(config_path, "gen-data") == EXIT_OK
    assert _run(config_path, "train-policy") == EXIT_OK
    assert _run(config_path, "train-worldmodel") == EXIT_OK
    assert _run(config_path, "train-worldmodel", "--reward-weight", "0") == EXIT_OK

    policy = read_json(tmp_path / "checkpoints" / "policy.json")
    assert set(policy["meta"]["bimodality"]["fractions"]) == {"left", "right"}

    assert _run(config_path, "eval", "--mode", "storm", "--trace") == EXIT_OK
    assert _run(config_path, "eval", "--mode", "reactive") == EXIT_OK
    assert _run(config_path, "eval", "--mode", "storm", "--planner-model", "simulator", "--task", "stack") == EXIT_OK

    storm_dir = runs / "eval-storm-all"
    _, rows = read_csv(storm_dir / "report.csv")
    assert [r["task"] for r in rows] == ["put_on_target", "stack", "put_in_zone"]
    assert all(int(r["episodes"]) == tiny_config.n_variations for r in rows)
    trajectories = sorted((storm_dir / "trajectories").glob("*.jsonl"))
    assert len(trajectories) == len(TaskId) * tiny_config.n_variations
    assert trajectories[0].name == "put_in_zone_v00_r0.jsonl"
    assert len(list((storm_dir / "traces").glob("*.jsonl"))) == len(trajectories)
    assert not (runs / "eval-reactive-all" / "traces").exists()
    assert (runs / "eval-storm-sim-stack" / "report.csv").exists()

    assert _run(config_path, "ablate") == EXIT_OK
    ablation = read_json(runs / "ablate" / "ablation.json")
    arms = {row["arm"] for row in ablation["rows"]}
    assert arms == {"action+reward", "action-only"}
    assert (runs / "ablate" / "deltas.csv").exists()

    assert _run(config_path, "report", str(storm_dir), str(runs / "eval-reactive-all")) == EXIT_OK
    header, summary = read_csv(runs / "report" / "summary.csv")
    assert header == ["arm", "put_on_target", "stack", "put_in_zone", "average"]
    assert [r["arm"] for r in summary] == ["reactive", "storm"]

    assert _run(config_path, "report", str(storm_dir), str(storm_dir)) == EXIT_VALIDATION


def test_eval_is_reproducible_across_jobs(tmp_path, tiny_config):
    config_path = _config_file(tmp_path, tiny_config)
    assert _run(config_path, "gen-data") == EXIT_OK
    assert _run(config_path, "train-policy") == EXIT_OK

    run_dir = tmp_path / "runs" / "eval-reactive-all"
    assert _run(config_path, "eval", "--mode", "reactive") == EXIT_OK
    serial = {p.name: p.read_bytes() for p in sorted((run_dir / "trajectories").glob("*.jsonl"))}
    report = (run_dir / "report.csv").read_bytes()

    assert _run(config_path, "eval", "--mode", "reactive", "--jobs", "2") == EXIT_OK
    parallel = {p.name: p.read_bytes() for p in sorted((run_dir / "trajectories").glob("*.jsonl"))}
    assert parallel == serial
    assert (run_dir / "report.csv").read_bytes() == report
    assert read_jsonl(run_dir / "trajectories" / "stack_v01_r0.jsonl")


def test_report_refuses_mixed_configs_without_force(tmp_path, tiny_config):
    config_path = _config_file(tmp_path, tiny_config)
    assert _run(config_path, "gen-data") == EXIT_OK
    assert _run(config_path, "train-policy") == EXIT_OK
    assert _run(config_path, "eval", "--mode", "reactive", "--task", "stack") == EXIT_OK
    assert _run(config_path, "eval", "--mode", "reactive", "--task", "put_in_zone",
                "--flaky", "1", "--out-dir", str(tmp_path / "other")) == EXIT_OK

    dirs = [tmp_path / "runs" / "eval-reactive-stack", tmp_path / "other" / "eval-reactive-flaky1-put_in_zone"]
    with pytest.raises(UsageError):
        merge_reports(dirs)
    arms, tasks, table = merge_reports(dirs, force=True)
    assert arms == ["reactive", "reactive@flaky1"]
    assert tasks == ["stack", "put_in_zone"]
    assert set(table) == {("reactive", "stack"), ("reactive@flaky1", "put_in_zone")}
    assert _run(config_path, "report", *map(str, dirs)) == EXIT_VALIDATION
    assert _run(config_path, "report", "--force", *map(str, dirs)) == EXIT_OK
    assert Path(tmp_path / "runs" / "report" / "summary.json").exists()
