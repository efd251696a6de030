import pytest
import torch

from subregion_seg.attention import ModalityAttention
from subregion_seg.model import ModelConfig, build_model


def directional_fd(loss_fn, params, rng, h=1e-5):
    """Compare the analytic directional derivative against central differences.

    ``params`` are float64 tensors with ``requires_grad``; a random unit
    direction is drawn over all of them. Returns ``(analytic, numeric)``.
    """
    dirs = [torch.from_numpy(rng.standard_normal(p.shape)) for p in params]
    norm = torch.sqrt(sum((d**2).sum() for d in dirs))
    dirs = [d / norm for d in dirs]
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = float(sum((p.grad * d).sum() for p, d in zip(params, dirs) if p.grad is not None))
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(h * d)
        up = float(loss_fn())
        for p, d in zip(params, dirs):
            p.sub_(2 * h * d)
        down = float(loss_fn())
        for p, d in zip(params, dirs):
            p.add_(h * d)
    return analytic, (up - down) / (2 * h)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture(scope="session")
def desk_config():
    return ModelConfig.desk()


@pytest.fixture
def desk_model(desk_config):
    return build_model(desk_config, seed=0)


@pytest.fixture
def desk_model64(desk_config):
    return build_model(desk_config, seed=0).double()


def random_attention(channels, rng, scale=0.5, dtype=torch.float32):
    att = ModalityAttention(channels)
    with torch.no_grad():
        att.weight.copy_(torch.from_numpy(rng.normal(0, scale, att.weight.shape)))
        att.bias.copy_(torch.from_numpy(rng.normal(0, scale, att.bias.shape)))
    return att.to(dtype)


def random_slices(rng, b, size=(64, 64), m=4):
    return torch.from_numpy(rng.uniform(0, 255, size=(b, *size, m)))


# -- acceptance summary -------------------------------------------------------------


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, text): acceptance criterion checked by a test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is not None and call.when == "call":
        item.config._criteria = getattr(item.config, "_criteria", {})
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        item.config._criteria[marker.args[0]] = (marker.args[1], call.excinfo is None, call.duration, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(results, key=lambda c: int(c[1:])):
        text, ok, seconds, detail = results[cid]
        line = f"{cid} {'PASS' if ok else 'FAIL'}  {text}  ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f"\n     {detail}" if detail else ""))
