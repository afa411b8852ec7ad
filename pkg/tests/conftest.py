import math

import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def bilinear_oracle(x, out_h, out_w):
    """Half-pixel bilinear resize of a CxHxW numpy array, one output pixel at a time."""
    c, h, w = x.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        sy = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        ly = sy - y0
        for j in range(out_w):
            sx = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            lx = sx - x0
            out[:, i, j] = ((1 - ly) * (1 - lx) * x[:, y0, x0] + (1 - ly) * lx * x[:, y0, x1]
                            + ly * (1 - lx) * x[:, y1, x0] + ly * lx * x[:, y1, x1])
    return out


def attention_loop(q, k, v):
    """O(N^2) scalar-loop softmax attention."""
    n, d = q.shape
    m = k.shape[0]
    z = np.zeros((n, v.shape[1]))
    for i in range(n):
        e = [sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d) for j in range(m)]
        top = max(e)
        w = [math.exp(x - top) for x in e]
        s = sum(w)
        for j in range(m):
            z[i] += (w[j] / s) * v[j]
    return z


# acceptance summary: one line per criterion, printed after the run

_ACCEPTANCE_KEY = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, lines, number, title):
        self.lines, self.number, self.title = lines, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number} {status}: {self.title}" + (f" ({self.detail})" if self.detail else "")
        self.lines.append(line)
        print(line)
        return False


@pytest.fixture
def criterion(request):
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])
    return lambda number, title: _Criterion(lines, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
