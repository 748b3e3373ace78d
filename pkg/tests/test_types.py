import numpy as np
import pytest

from src.core.errors import ShapeError, UsageError
from src.core.types import (ActionChunk, ObservationVec, Trajectory, TrajectoryStep, read_trajectory,
                            write_trajectory)


def _obs(task_id=0):
    return ObservationVec(gripper_xy=(0.5, 0.25), holding=0, gripper_closed=1,
                          objects_xy=((0.1, 0.2), (0.3, 0.4)), target_xy=(0.9, 0.8), task_id=task_id)


def test_observation_layout():
    arr = _obs(task_id=2).to_array()
    assert arr.shape == (11,)
    assert list(arr) == [0.5, 0.25, 0.0, 1.0, 0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 2.0]


def test_features_drop_task_and_rescale():
    feats = _obs().features()
    assert feats.shape == (10,)
    assert feats[0] == pytest.approx(0.0)
    assert feats[1] == pytest.approx(-0.5)
    assert feats[3] == pytest.approx(1.0)


def test_from_array_clamps_and_rounds():
    values = [1.3, -0.2, 0.7, 0.2, 0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 1.6]
    obs = ObservationVec.from_array(values)
    assert obs.gripper_xy == (1.0, 0.0)
    assert obs.holding == 1
    assert obs.gripper_closed == 0
    assert obs.task_id == 2


def test_from_array_rejects_wrong_width():
    with pytest.raises(ShapeError):
        ObservationVec.from_array(np.zeros(9))


def test_action_chunk_clamps():
    chunk = ActionChunk([[0.5, -0.5, 3.0], [0.05, 0.0, -2.0]])
    assert chunk.actions.tolist() == [[0.1, -0.1, 1.0], [0.05, 0.0, -1.0]]
    assert chunk.horizon == 2


def test_action_chunk_is_read_only():
    chunk = ActionChunk(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        chunk.actions[0, 0] = 1.0


def test_action_chunk_rejects_bad_shape():
    with pytest.raises(ShapeError):
        ActionChunk(np.zeros((2, 2)))


def test_normalized_maps_displacement_to_unit_range():
    chunk = ActionChunk([[0.1, -0.05, 0.5]])
    assert chunk.normalized().tolist() == pytest.approx([1.0, -0.5, 0.5])
    back = ActionChunk.from_normalized(chunk.normalized(), 1)
    assert back.same_as(chunk)


def _step(reward, done=False, success=False):
    return TrajectoryStep(_obs(), ActionChunk(np.zeros((1, 3))), reward, done, success)


def test_discounted_return():
    traj = Trajectory(seed=0, task_id=0, variation_id=0, steps=[_step(1.0), _step(2.0, done=True)])
    assert traj.discounted_return(0.5) == pytest.approx(2.0)
    assert not traj.success


def test_validate_rejects_early_done():
    traj = Trajectory(seed=0, task_id=0, variation_id=0, steps=[_step(0.0, done=True), _step(0.0)])
    with pytest.raises(UsageError):
        traj.validate()


def test_validate_rejects_success_without_done():
    traj = Trajectory(seed=0, task_id=0, variation_id=0, steps=[_step(10.0, success=True)])
    with pytest.raises(UsageError):
        traj.validate()


def test_trajectory_file_round_trip(tmp_path):
    traj = Trajectory(seed=4, task_id=1, variation_id=7, meta={"flaky_grasps": 2},
                      steps=[_step(0.25), _step(10.0, done=True, success=True)])
    path = tmp_path / "traj.jsonl"
    write_trajectory(path, traj)
    loaded = read_trajectory(path)
    assert (loaded.seed, loaded.task_id, loaded.variation_id) == (4, 1, 7)
    assert loaded.meta == {"flaky_grasps": 2}
    assert loaded.success
    assert [s.reward for s in loaded.steps] == [0.25, 10.0]
    assert loaded.steps[0].obs == traj.steps[0].obs


def test_empty_trajectory_file_rejected(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(UsageError):
        read_trajectory(path)
