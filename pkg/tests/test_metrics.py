import math

import numpy as np
import pytest

from src.core import metrics
from src.core.env import TaskId, TaskSpec, observe, reset, scripted_expert, step
from src.core.errors import NumericalError, ShapeError, UsageError
from src.core.metrics import (EvalReport, GaussianSummary, ReferenceEpisode, ReportRow, ablation_compare,
                              frechet_distance, imagine, psnr, rate_stderr, ssim, success_rate,
                              success_report, summarize_rollouts, trajectory_windows)
from src.core.rng import rng_stream
from src.core.types import ActionChunk, Trajectory, TrajectoryStep
from src.core.world_model import TransitionBatch, WorldModel, fit_codebook


def _gaussian(mean, var):
    return GaussianSummary(np.array([mean]), np.array([[var]]))


def test_frechet_between_shifted_unit_gaussians():
    assert frechet_distance(_gaussian(0.0, 1.0), _gaussian(1.0, 1.0)) == pytest.approx(1.0)
    assert frechet_distance(_gaussian(0.0, 1.0), _gaussian(2.0, 1.0)) == pytest.approx(4.0)


def test_frechet_between_scaled_gaussians():
    assert frechet_distance(_gaussian(0.0, 1.0), _gaussian(0.0, 4.0)) == pytest.approx(1.0)


def test_frechet_of_identical_summaries_is_zero():
    data = rng_stream(0, "fd").standard_normal((50, 3))
    summary = summarize_rollouts(data)
    assert frechet_distance(summary, summary) == pytest.approx(0.0, abs=1e-9)
    assert frechet_distance(summary, summary, eps=1e-8) == pytest.approx(0.0, abs=1e-9)


def test_frechet_dimension_mismatch():
    with pytest.raises(ShapeError):
        frechet_distance(_gaussian(0.0, 1.0), GaussianSummary(np.zeros(2), np.eye(2)))


@pytest.mark.parametrize("seed", range(20))
def test_frechet_matches_closed_form_for_diagonal_covariances(seed):
    rng = rng_stream(seed, "fd-diag")
    mean_a, mean_b = rng.standard_normal(4), rng.standard_normal(4)
    var_a, var_b = rng.uniform(0.05, 3.0, size=4), rng.uniform(0.05, 3.0, size=4)
    a = GaussianSummary(mean_a, np.diag(var_a))
    b = GaussianSummary(mean_b, np.diag(var_b))
    expected = float(np.sum((mean_a - mean_b) ** 2) + np.sum((np.sqrt(var_a) - np.sqrt(var_b)) ** 2))
    assert frechet_distance(a, b) == pytest.approx(expected, rel=1e-9, abs=1e-12)
    assert frechet_distance(b, a) == pytest.approx(frechet_distance(a, b), rel=1e-9, abs=1e-12)


def test_frechet_of_rank_deficient_summary_is_zero():
    data = rng_stream(1, "fd").standard_normal((30, 3))
    data[:, 2] = 0.5
    summary = summarize_rollouts(data)
    assert frechet_distance(summary, summary) == pytest.approx(0.0, abs=1e-6)


def test_frechet_clamps_rounding_residue(monkeypatch):
    monkeypatch.setattr(metrics, "_sqrt_product", lambda a, b: np.array([[1.0 + 1e-10]]))
    assert frechet_distance(_gaussian(0.0, 1.0), _gaussian(0.0, 1.0)) == 0.0


def test_frechet_raises_on_negative_distance(monkeypatch):
    monkeypatch.setattr(metrics, "_sqrt_product", lambda a, b: np.array([[5.0]]))
    with pytest.raises(NumericalError):
        frechet_distance(_gaussian(0.0, 1.0), _gaussian(0.0, 1.0))


def test_summary_uses_unbiased_covariance():
    summary = summarize_rollouts(np.array([0.0, 2.0]))
    assert summary.mean.tolist() == [1.0]
    assert summary.cov.tolist() == [[2.0]]


def test_summary_needs_more_samples_than_dimensions():
    with pytest.raises(UsageError):
        summarize_rollouts(np.zeros((2, 2)))


def test_asymmetric_covariance_rejected():
    with pytest.raises(ValueError):
        GaussianSummary(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_psnr():
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(0.0)
    assert psnr(np.full((4, 4), 0.5), np.full((4, 4), 0.5)) == 100.0
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0)
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_drops_as_noise_grows():
    rng = rng_stream(0, "psnr")
    frame = rng.uniform(0, 1, size=(16, 16))
    noise = rng.standard_normal((16, 16))
    scores = [psnr(frame, frame + level * noise) for level in (0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5)]
    assert all(later < earlier for earlier, later in zip(scores, scores[1:]))


def test_ssim_identity_and_symmetry():
    rng = rng_stream(0, "ssim")
    a = rng.uniform(0, 1, size=(16, 16))
    b = np.clip(a + 0.2 * rng.standard_normal((16, 16)), 0, 1)
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, b) == pytest.approx(ssim(b, a))
    assert ssim(a, b) < 1.0


def test_trajectory_windows():
    obs = [observe(reset(TaskSpec(variation_id=v))) for v in range(5)]
    windows = trajectory_windows(obs, 4)
    assert windows.shape == (2, 44)
    assert windows[1, :11].tolist() == obs[1].to_array().tolist()
    assert trajectory_windows(obs[:3], 4).shape == (0, 44)


def _trajectory(task_id, success):
    state = reset(TaskSpec(TaskId(task_id), variation_id=0))
    step_ = TrajectoryStep(observe(state), ActionChunk(np.zeros((1, 3))), 10.0 if success else 0.0, True, success)
    return Trajectory(seed=0, task_id=task_id, variation_id=0, steps=[step_])


def test_success_rate_and_stderr():
    rate, n = success_rate([_trajectory(0, True), _trajectory(0, True), _trajectory(0, False)])
    assert (rate, n) == (pytest.approx(2 / 3), 3)
    assert rate_stderr(rate, n) == pytest.approx(math.sqrt(2 / 9 / 3))
    assert rate_stderr(0.5, 0) == 0.0
    with pytest.raises(UsageError):
        success_rate([])


def test_success_report_groups_by_task():
    trajectories = [_trajectory(0, True), _trajectory(1, False), _trajectory(1, True), _trajectory(0, True)]
    rows = success_report(trajectories, "storm", {0: "put_on_target", 1: "stack"})
    assert [(r.task, r.episodes, r.successes, r.success_rate) for r in rows] == [
        ("put_on_target", 2, 2, 1.0), ("stack", 2, 1, 0.5)]
    assert all(r.arm == "storm" for r in rows)


def test_long_format_skips_missing_metrics():
    report = EvalReport(rows=[ReportRow("stack", "storm", episodes=4, successes=3, success_rate=0.75)])
    assert report.long_format() == [("stack", "storm", "episodes", 4), ("stack", "storm", "successes", 3),
                                     ("stack", "storm", "success_rate", 0.75)]
    assert EvalReport.from_dict(report.to_dict()).rows == report.rows


def _reference_episodes(n=3, length=5):
    episodes = []
    for v in range(n):
        task = TaskId(v % 3)
        state = reset(TaskSpec(task, variation_id=v))
        observations, actions, rewards = [observe(state)], [], []
        for _ in range(length):
            chunk = scripted_expert(state, "left")
            state, reward, done, _ = step(state, chunk)
            observations.append(observe(state))
            actions.append(chunk)
            rewards.append(reward)
            if done:
                break
        episodes.append(ReferenceEpisode(task.name.lower(), observations, actions, rewards))
    return episodes


def _world_model(config, episodes):
    records = [(e.observations[i], e.actions[i], e.observations[i + 1], e.rewards[i])
               for e in episodes for i in range(len(e.actions))]
    data = TransitionBatch.from_records(records)
    codebook = fit_codebook(np.concatenate([data.obs, data.next_obs]), config.codebook_size)
    return WorldModel.create(codebook, config, rng_stream(config.seed, "wm-init"))


def test_reference_episode_lengths_checked():
    obs = observe(reset(TaskSpec()))
    with pytest.raises(ShapeError):
        ReferenceEpisode("put_on_target", [obs], [ActionChunk(np.zeros((1, 3)))], [0.0])


def test_imagination_is_reproducible(tiny_config):
    episodes = _reference_episodes()
    model = _world_model(tiny_config, episodes)
    first = imagine(model, episodes, seed=2)
    again = imagine(model, episodes, seed=2)
    assert first.observations == again.observations
    assert first.predicted_rewards == again.predicted_rewards
    assert [len(o) for o in first.observations] == [len(e.observations) for e in episodes]


def test_self_ablation_has_zero_deltas(tiny_config):
    episodes = _reference_episodes(6)
    model = _world_model(tiny_config, episodes)
    report = ablation_compare(model, model, episodes, seed=1, window=1)
    assert set(report.deltas) == {"all", "put_in_zone", "put_on_target", "stack"}
    for deltas in report.deltas.values():
        assert set(deltas) == {"fd_traj", "psnr", "ssim"} or set(deltas) == {"psnr", "ssim"}
        assert all(v == 0.0 for v in deltas.values())
    assert report.row("all", "action+reward").fd_traj is not None


def test_action_only_arm_reports_no_reward_error(tiny_config):
    episodes = _reference_episodes()
    with_reward = _world_model(tiny_config, episodes)
    action_only = _world_model(tiny_config, episodes)
    with_reward.lambda_reward = 20.0
    action_only.lambda_reward = 0.0
    report = ablation_compare(with_reward, action_only, episodes, seed=1)
    assert report.row("all", "action+reward").reward_mse is not None
    assert report.row("all", "action-only").reward_mse is None


def test_ablation_rejects_mismatched_training(tiny_config):
    episodes = _reference_episodes()
    a = _world_model(tiny_config, episodes)
    b = _world_model(tiny_config, episodes)
    a.train_meta = {"seed": 0, "total_steps": 10, "lambda_reward": 20.0}
    b.train_meta = {"seed": 0, "total_steps": 20, "lambda_reward": 0.0}
    with pytest.raises(UsageError):
        ablation_compare(a, b, episodes)
    with pytest.raises(UsageError):
        ablation_compare(a, a, [])
