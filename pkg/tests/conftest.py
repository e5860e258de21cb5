import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pointcaps.config import ModelConfig  # noqa: E402
from pointcaps.dataset import make_synthetic_dataset  # noqa: E402

# A few-second configuration: every layer present, every width tiny.
TINY = """
[model]
extractor = {extractor}
aggregator = {aggregator}
classifier = {classifier}
mlp_widths = 8; 8
final_width = 16
stn_widths = 8,16
stn_dense_widths = 16
knn_k = 4
K = 4
q = 8
t = 4
z = 4
r = 2
fc_hidden = 16,8
decoder_hidden = 16,32
vlad_init_batches = 2

[data]
n_points = 32

[train]
batch_size = 8
epochs = 2
lr = 0.005
"""


def tiny_config(extractor="pointnet", aggregator="maxpool", classifier="capsule", **changes):
    cfg = ModelConfig.from_text(TINY.format(extractor=extractor, aggregator=aggregator, classifier=classifier))
    return cfg.replace(**changes).validate() if changes else cfg


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_synthetic_dataset(("sphere", "cube", "cylinder", "cone"), 10, 32, seed=0)


def pytest_terminal_summary(terminalreporter, config):
    from test_acceptance import ACCEPTANCE_KEY

    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda text: int(text.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
