import numpy as np
import pytest
import torch

from litebound.data import ImageSample, SynthSpec, generate_synthetic

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, 11):
        if k in ACCEPTANCE:
            ok, detail = ACCEPTANCE[k]
            terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {k:2d}: NOT RUN")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus() -> list[ImageSample]:
    return generate_synthetic(SynthSpec(count=8, canvas=64, seed=3), prefix="tiny")


def random_sample(rng: np.random.Generator, h: int = 32, w: int = 32, sid: str = "s") -> ImageSample:
    image = rng.random((h, w, 3)).astype(np.float32)
    mask = (rng.random((h, w)) < 0.4).astype(np.uint8)
    return ImageSample(sid, image, mask, "synthetic")
