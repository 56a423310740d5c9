import numpy as np
import pytest
import torch

from muranet.config import ModelConfig, SynthSpec
from muranet.data import generate_floorplan

torch.set_num_threads(1)


def central_difference(f, x, eps=1e-5):
    """Numerical gradient of scalar ``f`` at tensor ``x`` by central differences."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(f(x))
            flat[i] = orig - eps
            lo = float(f(x))
            flat[i] = orig
            g[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a, b):
    a = a.detach().double().flatten()
    b = b.detach().double().flatten()
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def check_gradient(f, x, eps=1e-5):
    """Relative error between autograd and central differences for ``f`` at ``x``."""
    xg = x.detach().clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(f(xg), xg)
    return relative_error(analytic, central_difference(f, x, eps))


@pytest.fixture
def tiny_config():
    return ModelConfig(
        input_size=(64, 64),
        stage_channels=(8, 8, 16, 16),
        stage_depths=(1, 1, 1, 1),
        head_hidden=8,
        decoder_channels=(8, 8, 8, 8),
    )


@pytest.fixture(scope="session")
def eight_samples():
    spec = SynthSpec(seed=0)
    return [generate_floorplan(spec, i) for i in range(8)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion; the test body sets ``detail``."""
    entry = {"detail": ""}
    yield entry
    number = entry["number"]
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {entry['name']}  {entry['detail']}".rstrip()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
