import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from diffsim import backends  # noqa: E402
from diffsim.sites import AttentionSite, MetricConfig  # noqa: E402


def random_image(seed: int, h: int = 32, w: int = 32) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


def smooth_image(seed: int, size: int = 32) -> np.ndarray:
    """Blobby image with some spatial structure (more realistic than white noise)."""
    rng = np.random.default_rng(seed)
    small = rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)
    return np.asarray(Image.fromarray(small).resize((size, size), Image.Resampling.BICUBIC))


def toy_config(backend="toy-self", kind="self", block="up_0", timestep=500, resolution=32, **kw):
    return MetricConfig(AttentionSite(backend, kind, block, 0, timestep, resolution), "toy_aas", **kw)


@pytest.fixture
def swap_backend():
    """Register a backend factory for one test and restore the original after."""
    saved = {}

    def swap(backend_id, factory):
        if backend_id not in saved:
            saved[backend_id] = backends._FACTORIES.get(backend_id)
        backends.register_backend(backend_id, factory, replace=True)

    yield swap
    for bid, factory in saved.items():
        if factory is None:
            backends._FACTORIES.pop(bid, None)
            backends._INSTANCES.pop(bid, None)
        else:
            backends.register_backend(bid, factory, replace=True)


@pytest.fixture
def image_dir(tmp_path):
    """Six small PNGs on disk; img0.png and img0_copy.png are byte-identical."""
    d = tmp_path / "imgs"
    d.mkdir()
    for i in range(5):
        Image.fromarray(smooth_image(100 + i)).save(d / f"img{i}.png")
    (d / "img0_copy.png").write_bytes((d / "img0.png").read_bytes())
    return d


# acceptance criteria bookkeeping: one PASS/FAIL/SKIP line per criterion

_CRITERIA: dict = {}
_RANK = {"PASS": 0, "SKIP": 1, "FAIL": 2}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    n, title = m.args
    state = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    prev = _CRITERIA.get(n, (title, "PASS"))[1]
    _CRITERIA[n] = (title, max(prev, state, key=_RANK.get))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, state = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {state}  {title}")
