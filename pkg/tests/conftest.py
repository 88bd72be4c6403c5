import numpy as np
import pytest

from delaycomp.depth import SyntheticDepth, synthetic_sequence
from delaycomp.geometry import CameraIntrinsics


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_intr():
    return CameraIntrinsics(60.0, 55.0, 31.5, 23.5, 64, 48)


@pytest.fixture(scope="session")
def corridor_seq():
    return synthetic_sequence("corridor", 40, seed=3)


@pytest.fixture(scope="session")
def frontal_seq():
    return synthetic_sequence("frontal", 40, seed=3)


@pytest.fixture(scope="session")
def corridor_source(corridor_seq):
    return SyntheticDepth(corridor_seq)


def brute_force_splat(u, v, z, r, colors, width, height, z_near, scale, hole_color=(0.0, 1.0, 0.0)):
    """Per-pixel loop over every disk; independent of the tiled rasterizer."""
    image = np.empty((height, width, 3))
    depth = np.full((height, width), np.inf)
    hole = np.ones((height, width), dtype=bool)
    for y in range(height):
        for x in range(width):
            ws, wz, wc = 0.0, 0.0, np.zeros(3)
            zmin = min((z[i] for i in range(len(z)) if r[i] >= 0 and (x - u[i]) ** 2 + (y - v[i]) ** 2 <= r[i] ** 2),
                       default=None)
            if zmin is None:
                image[y, x] = hole_color
                continue
            for i in range(len(z)):
                if r[i] >= 0 and (x - u[i]) ** 2 + (y - v[i]) ** 2 <= r[i] ** 2:
                    w = np.exp(-(z[i] - zmin) / scale)  # shift-invariant softmax
                    ws += w
                    wz += w * z[i]
                    wc += w * colors[i]
            image[y, x] = wc / ws
            depth[y, x] = wz / ws
            hole[y, x] = False
    return image, hole, depth


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance(capsys):
    """Record one PASS/FAIL line for an acceptance criterion and echo it live."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
