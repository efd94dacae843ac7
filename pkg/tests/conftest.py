import numpy as np
import pytest

from vspfreg.volume import Volume, gaussian_smooth


def blob_volume(n=16, seed=0, spacing=1.0):
    """Smooth random-ellipsoid volume centered on the origin."""
    rng = np.random.default_rng(seed)
    half = (n - 1) / 2.0
    ax = (np.arange(n) - half) * spacing
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    data = np.zeros((n, n, n))
    for k in range(5):
        c = rng.uniform(-0.3, 0.3, 3) * half * spacing
        rad = rng.uniform(0.2, 0.45, 3) * half * spacing
        inside = ((x - c[0]) / rad[0]) ** 2 + ((y - c[1]) / rad[1]) ** 2 + ((z - c[2]) / rad[2]) ** 2 <= 1
        data[inside] = 0.2 + 0.8 * (k + 1) / 5
    vol = Volume(data, (spacing,) * 3, (-half * spacing,) * 3)
    return gaussian_smooth(vol, 1.5 * spacing)


@pytest.fixture(scope="session")
def blob16():
    return blob_volume(16, seed=3)


# -- acceptance reporting ------------------------------------------------------

_CRITERIA = {}
CRITERION_NOTES = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    cid, title = mark.args
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        ok = call.excinfo is None
        prev = _CRITERIA.get(cid)
        _CRITERIA[cid] = (title, ok if prev is None else prev[1] and ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: (int("".join(ch for ch in c if ch.isdigit())), c)):
        title, ok = _CRITERIA[cid]
        tr.write_line(f"criterion {cid:<3s} {'PASS' if ok else 'FAIL'}  {title}")
        for line in CRITERION_NOTES.get(cid, []):
            tr.write_line(f"               {line}")
