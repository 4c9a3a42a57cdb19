import pytest
import torch

from nerfdistill.camera import pose_angles
from nerfdistill.evaluation.pose import (PoseRegressor, UntrainedRegressorError, angle_variance, fit_pose_regressor,
                                         pose_accuracy, train_pose_regressor)
from nerfdistill.rendering import RenderConfig
from nerfdistill.teacher import build_teacher, sample_teacher, teacher_forward

from conftest import tiny_teacher_config


@pytest.fixture(scope="module")
def pose_teacher():
    return build_teacher(tiny_teacher_config("procedural", plane_channels=16, plane_resolution=32, low_res=16,
                                             render=RenderConfig(n_coarse=16, n_fine=16)))


@pytest.fixture(scope="module")
def data(pose_teacher):
    return sample_teacher(pose_teacher, 2000, torch.Generator().manual_seed(0))


@pytest.fixture(scope="module")
def regressor(data):
    return fit_pose_regressor(data.hr, data.c, epochs=40, seed=0)


@pytest.fixture(scope="module")
def fresh(pose_teacher):
    return sample_teacher(pose_teacher, 400, torch.Generator().manual_seed(1))


def teacher_images(teacher):
    return lambda z, c: teacher_forward(teacher, z, c).hr.clamp(0, 1)


class TestRegressor:
    def test_holdout_below_tenth_of_variance(self, regressor):
        assert regressor.fitted
        assert regressor.holdout_mse < 0.1 * regressor.pose_variance

    def test_fresh_teacher_samples_agree_with_holdout(self, pose_teacher, regressor, fresh):
        mse = pose_accuracy(teacher_images(pose_teacher), fresh.z, fresh.c, regressor)
        assert mse < 0.1 * angle_variance(pose_angles(fresh.c.double()))
        assert mse < 1.5 * regressor.holdout_mse

    def test_shuffled_labels_do_not_leak(self, data):
        shuffled = fit_pose_regressor(data.hr, data.c, epochs=10, seed=0, shuffle_labels=True)
        assert shuffled.holdout_mse > 0.8 * shuffled.pose_variance

    def test_constant_image_cannot_beat_variance(self, regressor, data, fresh):
        mean_image = data.hr.mean(0, keepdim=True)
        const = lambda z, c: mean_image.expand(len(z), -1, -1, -1)  # noqa: E731
        mse = pose_accuracy(const, fresh.z, fresh.c, regressor)
        # a constant prediction k has MSE var + (k - mean)^2
        assert mse >= angle_variance(pose_angles(fresh.c.double())) - 1e-9

    def test_deterministic_given_seed(self, data):
        a = fit_pose_regressor(data.hr[:60], data.c[:60], epochs=2, seed=3)
        b = fit_pose_regressor(data.hr[:60], data.c[:60], epochs=2, seed=3)
        assert a.holdout_mse == b.holdout_mse
        assert torch.equal(a.predict(data.hr[:5]), b.predict(data.hr[:5]))

    def test_untrained_rejected(self, fresh):
        with pytest.raises(UntrainedRegressorError):
            pose_accuracy(lambda z, c: torch.zeros(len(z), 3, 32, 32), fresh.z[:4], fresh.c[:4], PoseRegressor())

    def test_needs_aligned_pairs(self, data):
        with pytest.raises(ValueError):
            fit_pose_regressor(data.hr[:20], data.c[:19])

    def test_train_from_teacher(self, pose_teacher):
        reg = train_pose_regressor(pose_teacher, 40, seed=0, epochs=1)
        assert reg.fitted and reg.pose_variance > 0
        assert reg.predict(torch.rand(3, 3, 32, 32)).shape == (3, 2)


def test_angle_variance_matches_numpy():
    a = torch.randn(100, 2, dtype=torch.float64)
    assert angle_variance(a) == pytest.approx(float(a.numpy().var(axis=0).mean()), rel=1e-12)
