import numpy as np
import pytest
import torch

from maxico.data import generate_synthetic

ACCEPTANCE_RESULTS = []


def central_difference(fn, tensor, eps=1e-6, max_entries=None, seed=0):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``tensor``.

    Perturbs ``tensor`` in place (restoring it). With ``max_entries`` only a
    random subset of entries is probed; returns (flat indices, estimates).
    """
    flat = tensor.data.view(-1)
    n = flat.numel()
    if max_entries is None or max_entries >= n:
        idx = np.arange(n)
    else:
        idx = np.random.default_rng(seed).choice(n, size=max_entries, replace=False)
    est = np.empty(len(idx))
    with torch.no_grad():
        for j, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            est[j] = (up - down) / (2 * eps)
    return idx, est


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_check(fn, params, eps=1e-6, max_entries=None):
    """Worst relative error between autograd and central differences over ``params``."""
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for k, p in enumerate(params):
        analytic = p.grad.detach().view(-1).numpy().copy() if p.grad is not None else np.zeros(p.numel())
        idx, numeric = central_difference(fn, p, eps, max_entries, seed=k)
        worst = max(worst, relative_error(analytic[idx], numeric))
    return worst


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(12, seed=3)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)
