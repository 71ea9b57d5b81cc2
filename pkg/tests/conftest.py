import numpy as np
import pytest

from muc import tensor as T


@pytest.fixture
def f64():
    with T.use_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_CONFIG = """\
# tiny pipeline for fast end-to-end checks
stage1_steps = 6
stage2_steps = 6
rvq_steps = 4
vae_steps = 6
flow_steps = 6
ablation = true
warmup = 2
batch = 2
segment_frames = 128
n_layers = 2
model_dim = 64
heads = 2
tap_layer = 2
gla_iters = 8
n_steps = 4
"""


@pytest.fixture(scope="session")
def tiny_pipeline(tmp_path_factory):
    """A corpus of 9 clips and checkpoints trained for a handful of steps."""
    from muc import dataset, pipeline

    root = tmp_path_factory.mktemp("tiny")
    dataset.build_corpus(root / "corpus", 6, 1, 2, seed=3, duration_s=2.56, segment_s=1.28)
    cfg_path = root / "tiny.cfg"
    cfg_path.write_text(TINY_CONFIG + f"ckpt_dir = {root / 'ckpt'}\n")
    cfg, tcfg = pipeline.load_config(cfg_path)
    pipeline.train_all(root / "corpus" / "manifest.tsv", cfg, tcfg, echo=None)
    return root, cfg_path


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
