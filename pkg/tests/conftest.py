import contextlib

import numpy as np
import pytest

from uamsa import tensor as T
from uamsa.tensor import Tensor

FD_EPS = 1e-3
FD_RTOL = 1e-2
FD_FLOOR = 1e-6


@contextlib.contextmanager
def relu_signs():
    """Record the sign pattern of every ReLU input evaluated inside the block."""
    log = []
    orig = T.relu

    def spy(x):
        log.append(x.data > 0)
        return orig(x)

    T.relu = spy
    try:
        yield log
    finally:
        T.relu = orig


def numeric_grad(f, arr, idx, eps=FD_EPS):
    """Central difference; None when the step flips a ReLU (kink in between)."""
    old = arr[idx]
    with relu_signs() as base:
        f()
    arr[idx] = old + eps
    with relu_signs() as s_up:
        up = f()
    arr[idx] = old - eps
    with relu_signs() as s_down:
        down = f()
    arr[idx] = old
    for a, b, c in zip(base, s_up, s_down):
        if not (np.array_equal(a, b) and np.array_equal(a, c)):
            return None
    return (up - down) / (2 * eps)


def gradcheck(fn, inputs, seed=0, n_coords=25, eps=FD_EPS, rtol=FD_RTOL, min_checked=0.5):
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` with central differences.

    ``inputs`` are float64 Tensors with requires_grad set on the ones to check.
    Coordinates whose +-eps step crosses a ReLU kink are skipped (the central
    difference is not a derivative there); at least ``min_checked`` of the
    sampled coordinates must survive.
    Returns the worst relative error seen over entries with |analytic| > 1e-6.
    """
    gen = np.random.default_rng(seed)
    with T.Tape() as tape:
        out = fn(*inputs)
    proj = gen.standard_normal(out.shape)
    with tape:
        loss = T.sum_(T.mul(out, Tensor(proj, dtype=np.float64)))
    for t in inputs:
        t.grad = None
    T.backward(tape, loss)

    def value():
        return float(np.sum(fn(*inputs).data * proj))

    worst = 0.0
    checked = skipped = 0
    for t in inputs:
        if not t.requires_grad:
            continue
        assert t.grad is not None, "no gradient reached an input"
        flat = t.data.reshape(-1)
        picks = gen.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for k in picks:
            idx = np.unravel_index(k, t.shape)
            a = float(t.grad[idx])
            n = numeric_grad(value, t.data, idx, eps)
            if n is None:
                skipped += 1
                continue
            checked += 1
            if abs(a) > FD_FLOOR:
                err = abs(a - n) / max(abs(a), abs(n))
                worst = max(worst, err)
                assert err < rtol, f"index {idx}: analytic {a}, numeric {n}"
            else:
                assert abs(n) < 1e-4, f"index {idx}: analytic {a}, numeric {n}"
    assert checked >= min_checked * (checked + skipped), f"{skipped} of {checked + skipped} coordinates straddle a kink"
    return worst


def leaf(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def naive_conv(x, w, b=None, stride=1, padding=0):
    B, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, o, i, j] = np.sum(patch * w[o])
            if b is not None:
                out[n, o] += b[o]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One verdict line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE.values():
            terminalreporter.write_line(line)
