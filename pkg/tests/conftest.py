import pytest
import torch

from cmcrl import tensor as tc

torch.set_num_threads(1)


@pytest.fixture
def f64():
    """Run the test body in 64-bit precision mode."""
    with tc.precision("float64"):
        yield


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)


TINY_OVERRIDES = [
    "data.n_classes=2", "data.n_per_class=8", "data.image_size=16",
    "augment.image_base_size=18",
    "encoder.widths=[4,8]", "encoder.blocks_per_stage=1", "encoder.proj_dim=4",
    "cmcrl.batch_size=4", "cmcrl.epochs=3", "cmcrl.milestones=[2]",
    "probe.steps=100",
    "gan.z_dim=8", "gan.g_channels=8", "gan.d_channels=8", "gan.attention_resolution=8", "gan.batch_size=4", "gan.iterations=4",
    "gan.sample_every=2", "gan.log_every=1", "eval.n_generated=8",
]


@pytest.fixture(scope="session")
def tiny_cfg():
    from cmcrl.config import RunConfig

    return RunConfig().with_overrides(TINY_OVERRIDES)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory, tiny_cfg):
    from cmcrl import dataio

    root = tmp_path_factory.mktemp("tiny_data")
    d = tiny_cfg.data
    dataio.synth_dataset(root, d.n_classes, d.n_per_class, d.seed, d.image_size, d.train_fraction)
    return root


@pytest.fixture(scope="session")
def tiny_data(tiny_data_dir):
    from cmcrl import dataio

    return dataio.load_dataset(tiny_data_dir)


@pytest.fixture(scope="session")
def tiny_cmcrl(tiny_cfg, tiny_data):
    from cmcrl.contrastive import train_cmcrl

    return train_cmcrl(tiny_cfg, tiny_data)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Print and keep one PASS/FAIL line; the lines are repeated in the terminal summary."""
    line = f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
