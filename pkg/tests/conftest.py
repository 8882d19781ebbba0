"""Shared fixtures and finite-difference helpers."""
from __future__ import annotations

import numpy as np
import pytest

from dpreg import autodiff as ad
from dpreg.synth import SyntheticSpec, synth_generate


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def check_grad(build, inputs, h: float = 1e-6, max_entries: int = 24, directions: int = 4, seed: int = 0):
    """Compare tape gradients with central differences.

    ``build(*tensors)`` returns a scalar Tensor; ``inputs`` are arrays.
    Inputs with at most ``max_entries`` values are probed entry by entry;
    larger ones along ``directions`` random unit directions.  Returns the
    worst relative error (max abs difference over the larger max magnitude).
    """
    rng = np.random.default_rng(seed)
    tape = ad.Tape()
    tracked = [tape.variable(np.array(x, dtype=np.float64)) for x in inputs]
    grads = tape.backward(build(*tracked))
    worst = 0.0
    for k, x in enumerate(inputs):
        x = np.asarray(x, dtype=np.float64)

        def f(v, k=k):
            args = [ad.Tensor(np.array(a, dtype=np.float64)) for a in inputs]
            args[k] = ad.Tensor(v)
            return float(build(*args).data)

        ana = grads[tracked[k]]
        if x.size <= max_entries:
            worst = max(worst, rel_error(ana, numeric_grad(f, x, h)))
            continue
        dirs = rng.standard_normal((directions,) + x.shape)
        dirs /= np.sqrt((dirs**2).sum(axis=tuple(range(1, dirs.ndim)), keepdims=True))
        num = np.array([(f(x + h * d) - f(x - h * d)) / (2 * h) for d in dirs])
        worst = max(worst, rel_error((ana * dirs).reshape(directions, -1).sum(1), num))
    return worst


@pytest.fixture(scope="session")
def phantom_pair():
    """One seeded 32^3 synthetic pair shared by the slower tests."""
    return synth_generate(SyntheticSpec(seed=5), 1)[0]


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("ab")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'} ({detail})")
