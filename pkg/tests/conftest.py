import numpy as np
import pytest
import torch

from protobagnet.backbone import BackboneConfig, LayerSpec, build_backbone


def central_difference(fn, x, h=1e-6):
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of tensor ``x`` (in place perturbation)."""
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            g[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


@pytest.fixture
def tiny_cfg():
    layers = (
        LayerSpec(3, 1, 3),
        LayerSpec(3, 2, 4),
        LayerSpec(1, 1, 4, nonlinearity="sigmoid"),
    )
    return BackboneConfig(layers, in_channels=1, height=13, width=13)


@pytest.fixture
def tiny_backbone(tiny_cfg):
    return build_backbone(tiny_cfg, seed=3).double()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance summary -----------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
