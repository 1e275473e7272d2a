import numpy as np
import pytest

from mnnca.imageio import synthetic_texture


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def target64():
    return synthetic_texture(64, seed=0)


def conv_loop(x, w, groups=1, dilation=1):
    """Scalar brute-force circular cross-correlation."""
    B, Cin, H, W = x.shape
    O, Ig, kh, kw = w.shape
    Og = O // groups
    out = np.zeros((B, O, H, W))
    for b in range(B):
        for o in range(O):
            g = o // Og
            for y in range(H):
                for xx in range(W):
                    s = 0.0
                    for i in range(Ig):
                        for ty in range(kh):
                            for tx in range(kw):
                                yy = (y + (ty - kh // 2) * dilation) % H
                                xc = (xx + (tx - kw // 2) * dilation) % W
                                s += w[o, i, ty, tx] * x[b, g * Ig + i, yy, xc]
                    out[b, o, y, xx] = s
    return out


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
    print(ACCEPTANCE_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
