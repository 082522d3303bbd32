import numpy as np
import pytest

from dgdehaze.detector import DetectorConfig, pretrain_detector
from dgdehaze.hazegen import HazePolicy, build_dataset
from dgdehaze.shapes import ShapesSceneSpec, make_shapes_dataset


@pytest.fixture(scope="session")
def toy_world(tmp_path_factory):
    """Shared desk-scale corpus: 16 clean shapes scenes, their hazy twins,
    and a detector pretrained for 500 steps on the clean images."""
    root = tmp_path_factory.mktemp("toy_world")
    clean_manifest = make_shapes_dataset(
        ShapesSceneSpec(seed=7), 16, str(root / "clean"))
    hazy_manifest = build_dataset(
        clean_manifest, HazePolicy(seed=5), str(root / "hazy"))
    det = pretrain_detector(clean_manifest, DetectorConfig(steps=500, seed=3),
                            str(root / "detector.ckpt"))
    return {
        "root": root,
        "clean_manifest": clean_manifest,
        "hazy_manifest": hazy_manifest,
        "detector_ckpt": det.checkpoint_path,
        "detector_losses": det.losses,
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
