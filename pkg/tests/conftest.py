import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from muldef import nn  # noqa: E402
from muldef.data import Dataset, synth_blobs  # noqa: E402

REPO = Path(__file__).resolve().parents[1]


def mnist_root():
    env = os.environ.get("MULDEF_DATA_DIR")
    root = Path(env) if env else REPO / "data"
    for cand in (root, root / "mnist"):
        if (cand / "train-images-idx3-ubyte.gz").exists() or (cand / "train-images-idx3-ubyte").exists():
            return root
    return None


requires_mnist = pytest.mark.skipif(mnist_root() is None, reason="MNIST IDX files not found")


@pytest.fixture(scope="session")
def blobs():
    return synth_blobs(num_classes=3, n_per_class=120, dim=16, spread=0.08, seed=3,
                       image_shape=(4, 4, 1))


@pytest.fixture(scope="session")
def blob_split(blobs):
    return blobs.take(np.arange(240)), blobs.take(np.arange(240, 360), split="test")


def small_conv_spec(num_classes=3):
    return [nn.conv2d(1, 4, 3, stride=1, padding=1), nn.relu(), nn.flatten(),
            nn.dense(64, 16), nn.relu(), nn.dense(16, num_classes), nn.softmax()], (4, 4, 1)


@pytest.fixture(scope="session")
def trained_blob_net(blob_split):
    tr, _ = blob_split
    spec, shape = small_conv_spec()
    net = nn.Network.create(spec, shape, seed=11, id="T")
    nn.train(net, tr, nn.TrainConfig(batch_size=32, max_epochs=30, learning_rate=5e-3, rng_seed=1))
    return net


def make_dataset(x, y, num_classes):
    return Dataset(np.asarray(x, np.float32), np.asarray(y, np.int64), num_classes)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
