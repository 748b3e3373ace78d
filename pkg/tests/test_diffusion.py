import numpy as np
import pytest

from src.core.diffusion import (CandidateSet, DemoDataset, DiffusionPolicy, ExpertPolicy, NoiseSchedule,
                                RegressionPolicy, ddpm_loss, density_priors, forward_noise, mode_fractions,
                                mode_of, propose, q_posterior, sample, sample_batch, schedule_from_config,
                                train_policy)
from src.core.env import TaskId, TaskSpec, observe, reset, scripted_expert
from src.core.errors import ShapeError, UsageError
from src.core.nn import Mlp, check_gradients
from src.core.rng import rng_stream
from src.core.types import ActionChunk, ObservationVec
from src.utils.config import Config, with_overrides


def _obs(variation=0, task=TaskId.PUT_ON_TARGET):
    return observe(reset(TaskSpec(task, variation_id=variation)))


def _policy(config, label="policy-init"):
    return DiffusionPolicy.create(config, rng_stream(config.seed, label))


def test_forward_noise_interpolates():
    schedule = NoiseSchedule(np.array([0.75]))
    assert schedule.alpha_bar(1) == pytest.approx(0.25)
    assert forward_noise(schedule, np.array([1.0]), 1, np.array([0.0]))[0] == pytest.approx(0.5)
    assert forward_noise(schedule, np.array([1.0]), 1, np.array([1.0]))[0] == pytest.approx(0.5 + 0.75 ** 0.5)


def test_forward_noise_rejects_step_zero():
    with pytest.raises(ValueError):
        forward_noise(NoiseSchedule(np.array([0.1, 0.2])), np.zeros(3), 0, np.zeros(3))


def test_default_schedule_uses_literal_endpoints():
    schedule = schedule_from_config(Config())
    assert schedule.T == 50
    assert schedule.betas[1] == pytest.approx(1e-4)
    assert schedule.betas[50] == pytest.approx(0.02)
    assert 0.55 < schedule.alpha_bars[50] < 0.65


def test_short_schedule_is_rescaled():
    schedule = NoiseSchedule.linear(50, 1e-4, 0.02, reference_steps=1000)
    assert schedule.T == 50
    assert schedule.betas[1] == pytest.approx(0.002)
    assert schedule.betas[50] == pytest.approx(0.4)
    assert NoiseSchedule.linear(50, 1e-4, 0.02, reference_steps=None).betas[50] == pytest.approx(0.02)


def test_schedule_must_increase_below_one():
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.2, 0.1]))
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.5, 1.0]))


def test_first_step_posterior_returns_clean_estimate():
    schedule = NoiseSchedule(np.array([0.3, 0.4]))
    mean, variance = q_posterior(schedule, np.array([0.2, -0.4]), np.array([5.0, 5.0]), 1)
    assert mean.tolist() == pytest.approx([0.2, -0.4])
    assert variance == pytest.approx(0.0)


def _oracle_policy(horizon=4):
    """单步调度 + 线性去噪器：数据恒为 0 时恰好还原噪声"""
    schedule = NoiseSchedule(np.array([0.36]))
    action_dim = horizon * 3
    in_dim = action_dim + 8 + 10 + 2
    weight = np.zeros((action_dim, in_dim))
    weight[:, :action_dim] = np.eye(action_dim) / 0.6
    denoiser = Mlp((in_dim, action_dim), [weight], [np.zeros(action_dim)])
    return DiffusionPolicy(schedule, horizon, denoiser, np.zeros((3, 2)))


def test_perfect_denoiser_has_zero_loss():
    policy = _oracle_policy()
    rng = rng_stream(0, "oracle")
    x0 = np.zeros((5, 12))
    features = rng.standard_normal((5, 10))
    loss, _ = ddpm_loss(policy, x0, features, np.zeros(5, dtype=np.int64), rng)
    assert loss == pytest.approx(0.0, abs=1e-20)


def test_perfect_denoiser_samples_the_data():
    chunk = sample(_oracle_policy(), _obs(), rng_stream(0, "oracle-sample"))
    assert np.allclose(chunk.actions, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_ddpm_gradients_match_central_differences(tiny_config, seed):
    policy = _policy(with_overrides(tiny_config, seed=seed))
    rng = rng_stream(seed, "ddpm-grad")
    states = [reset(TaskSpec(task, variation_id=v + seed))
              for v, task in [(0, TaskId.STACK), (1, TaskId.PUT_ON_TARGET), (2, TaskId.PUT_IN_ZONE)]]
    data = DemoDataset.from_records([(observe(s), scripted_expert(s, "left"), "left") for s in states])
    t = rng.integers(1, tiny_config.diffusion_steps_t + 1, size=3)
    eps = rng.standard_normal(data.x0.shape)
    _, grads = ddpm_loss(policy, data.x0, data.features, data.task_ids, rng, t=t, eps=eps)

    def loss():
        return ddpm_loss(policy, data.x0, data.features, data.task_ids, None, t=t, eps=eps, with_grads=False)[0]

    assert check_gradients(loss, policy.parameters(), grads) < 1e-6


def test_samples_stay_in_action_range(tiny_config):
    raw = sample_batch(_policy(tiny_config), _obs(), 16, rng_stream(0, "sample"))
    assert raw.shape == (16, 12)
    assert np.all(np.abs(raw) <= 1.0)


def test_propose_returns_k_distinct_candidates(tiny_config):
    candidates = propose(_policy(tiny_config), _obs(), 6, rng_stream(0, "propose"))
    assert len(candidates) == 6
    assert sum(candidates.priors) == pytest.approx(1.0)
    assert candidates.priors == pytest.approx([1.0 / 6] * 6)
    for i in range(6):
        for j in range(i):
            assert np.max(np.abs(candidates.chunks[i].actions - candidates.chunks[j].actions)) >= 1e-3


def test_single_candidate_has_unit_prior(tiny_config):
    candidates = _policy(tiny_config).propose(_obs(), 1, rng_stream(0, "propose"))
    assert candidates.priors == [1.0]


def test_propose_rejects_zero_candidates(tiny_config):
    with pytest.raises(UsageError):
        propose(_policy(tiny_config), _obs(), 0, rng_stream(0, "propose"))


def test_propose_is_deterministic_given_stream(tiny_config):
    policy = _policy(tiny_config)
    a = propose(policy, _obs(), 4, rng_stream(5, "propose"), "density")
    b = propose(policy, _obs(), 4, rng_stream(5, "propose"), "density")
    assert all(x.same_as(y) for x, y in zip(a.chunks, b.chunks))
    assert a.priors == b.priors
    assert sum(a.priors) == pytest.approx(1.0)


def test_density_priors_favour_crowded_candidates():
    zero = ActionChunk(np.zeros((4, 3)))
    far = ActionChunk.from_normalized(np.ones(12), 4)
    priors = density_priors([zero, zero, far])
    assert sum(priors) == pytest.approx(1.0)
    assert priors[0] == pytest.approx(priors[1])
    assert priors[2] < priors[0]


def test_candidate_set_validation():
    chunk = ActionChunk(np.zeros((1, 3)))
    assert CandidateSet([chunk, chunk], [2.0, 6.0]).priors == [0.25, 0.75]
    with pytest.raises(ShapeError):
        CandidateSet([chunk], [0.5, 0.5])
    with pytest.raises(ValueError):
        CandidateSet([chunk], [0.0])


def test_mode_follows_detour_side():
    obs = ObservationVec((0.5, 0.5), 0, 0, ((0.8, 0.5), (0.2, 0.2)), (0.9, 0.9), 0)
    assert mode_of(obs, ActionChunk([[0.05, 0.03, 1.0]])) == "left"
    assert mode_of(obs, ActionChunk([[0.05, -0.03, 1.0]])) == "right"
    fractions = mode_fractions(obs, [ActionChunk([[0.05, 0.03, 1.0]])] * 3 + [ActionChunk([[0.05, -0.03, 1.0]])])
    assert fractions == {"left": 0.75, "right": 0.25}


def test_expert_chunks_are_labelled_with_their_mode():
    state = reset(TaskSpec(variation_id=3))
    for mode in ("left", "right"):
        assert mode_of(observe(state), scripted_expert(state, mode)) == mode


def test_empty_demo_set_rejected():
    with pytest.raises(UsageError):
        DemoDataset.from_records([])


def test_training_runs_requested_steps(tiny_config):
    policy = _policy(tiny_config)
    records = []
    for v in range(3):
        state = reset(TaskSpec(variation_id=v))
        for mode in ("left", "right"):
            records.append((observe(state), scripted_expert(state, mode), mode))
    history, optimizer = train_policy(policy, DemoDataset.from_records(records), tiny_config)
    assert [r.step for r in history] == list(range(tiny_config.policy_train_steps))
    assert all(np.isfinite(r.loss) for r in history)
    assert optimizer.step == tiny_config.policy_train_steps


def test_checkpoint_meta_rebuilds_same_network(tiny_config):
    policy = _policy(tiny_config)
    clone = DiffusionPolicy.from_checkpoint(policy.meta(), {k: v.copy() for k, v in policy.parameters().items()})
    x = rng_stream(0, "clone").standard_normal((2, 12))
    feats = rng_stream(1, "clone").standard_normal((2, 10))
    tids = np.array([0, 2])
    assert np.array_equal(policy.predict_noise(x, 3, feats, tids), clone.predict_noise(x, 3, feats, tids))
    assert np.array_equal(clone.schedule.betas, policy.schedule.betas)


def test_regression_policy_gradients(tiny_config):
    policy = RegressionPolicy.create(tiny_config, rng_stream(0, "regression-init"))
    rng = rng_stream(1, "regression-grad")
    x0 = rng.uniform(-1, 1, size=(3, 12))
    features = rng.standard_normal((3, 10))
    tids = np.array([0, 1, 1])
    _, grads = policy.loss_and_grads(x0, features, tids)
    assert check_gradients(lambda: policy.loss_and_grads(x0, features, tids)[0], policy.parameters(), grads) < 1e-6


def test_regression_policy_proposes_one_chunk(tiny_config):
    policy = RegressionPolicy.create(tiny_config, rng_stream(0, "regression-init"))
    candidates = policy.propose(_obs(), 3)
    assert all(c.same_as(candidates.chunks[0]) for c in candidates.chunks)


def test_expert_policy_alternates_modes():
    state = reset(TaskSpec(variation_id=1))
    candidates = ExpertPolicy(4).propose(state, 3)
    assert candidates.chunks[0].same_as(scripted_expert(state, "left"))
    assert candidates.chunks[1].same_as(scripted_expert(state, "right"))
    assert candidates.chunks[2].same_as(scripted_expert(state, "left"))
