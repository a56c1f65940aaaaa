import os
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


import pytest  # noqa: E402

from wstrack.nn import BackboneConfig  # noqa: E402
from wstrack.synthcam import SceneConfig, generate  # noqa: E402
from wstrack.trainer import PhasePlan, StepSchedule, ExpSchedule, TrainPlan  # noqa: E402

TOY_SCENE = SceneConfig(width=64, height=48, tip_scale=0.6, presence_rates=(0.5,) * 7, mean_on_frames=12, seed=4)
TOY_BACKBONE = BackboneConfig(stages=[(1, 6, 2), (1, 8, 1), (1, 8, 1)], stem_channels=6, input_downsample=2)


def toy_plan(epochs1=2, epochs2=2, lr=0.02):
    return TrainPlan(
        PhasePlan(epochs1, StepSchedule(lr, period=20), StepSchedule(lr, period=20), 1e-4),
        PhasePlan(epochs2, ExpSchedule(lr / 2, half_life=10), None, 1e-5, ("patch_mask",)),
        batch=8, backbone=TOY_BACKBONE,
    )


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """Two train, one val and one test video of 32 small frames."""
    root = tmp_path_factory.mktemp("toy") / "data"
    generate(TOY_SCENE, root, 4, 32, splits=(2, 1, 1))
    return root
