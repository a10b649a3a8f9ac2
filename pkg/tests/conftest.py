"""Shared fixtures: a small synthetic dataset and a model trained on it.

Session-scoped so the (deliberately tiny) training run happens once for
the whole suite.  The dataset uses a high-contrast, distractor-free spec
so a ~30-epoch run at 64x64 reaches usable quality; tests that need the
harder default data build their own.
"""

import pytest

from irisft.data import SynthSpec, generate_synthetic
from irisft.model import load_checkpoint
from irisft.train import TrainConfig, train

EASY_SPEC = SynthSpec(count=24, image_size=64, images_per_identity=3,
                      iris_radius_range=(0.18, 0.24),
                      sclera_intensity=(0.72, 0.92),
                      iris_intensity=(0.10, 0.28),
                      occluder_prob=0.1, distractor_count=(0, 0),
                      noise_sigma=0.005, seed=11)


@pytest.fixture(scope="session")
def synth_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth64")
    return generate_synthetic(EASY_SPEC, root)


@pytest.fixture(scope="session")
def fixture_config():
    return TrainConfig(loss="focal", alpha=0.25, gamma=2.0, lr=2e-2,
                       epochs=30, momentum=0.98, batch_size=4, seed=3,
                       input_resolution=64)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, synth_manifest, fixture_config):
    out = tmp_path_factory.mktemp("fixture_run")
    ckpt, log = train(synth_manifest, fixture_config, out)
    model, meta = load_checkpoint(ckpt)
    return {"manifest": synth_manifest, "checkpoint": ckpt, "model": model,
            "log": log, "config": fixture_config, "out": str(out),
            "meta": meta}
