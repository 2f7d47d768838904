import pytest
import torch

from mdpr.config import from_dict


def tiny_dict(**overrides):
    base = {
        "image_size": [64, 32],
        "backbone": {"widths": [8, 8, 16, 16, 16]},
        "embedding_size": 8,
        "sampler": {"P": 2, "S": 2},
        "dataset": {"n_ids": 4, "images_per_id": 4, "eval_images_per_id": 3},
        "optim": {"epochs": 1, "warmup_iters": 2, "base_lr": 1e-3},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return base


@pytest.fixture
def tiny_cfg(tmp_path):
    return from_dict(tiny_dict(output_dir=str(tmp_path / "run")))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def numeric_grad(fn, x, h=1e-6):
    """Central finite differences of scalar ``fn`` w.r.t. every entry of ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    return ((a - b).norm() / b.norm().clamp_min(1e-30)).item()


# acceptance criteria are tagged with @pytest.mark.criterion("name"); one
# PASS/FAIL line per criterion is printed at the end of the session
_criteria: dict[str, str] = {}


def pytest_runtest_logreport(report):
    name = getattr(report, "criterion", None)
    if name is None:
        return
    if report.when == "call" or report.outcome == "failed":
        prev = _criteria.get(name, "PASS")
        _criteria[name] = "FAIL" if report.outcome == "failed" or prev == "FAIL" else "PASS"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _criteria.items():
        terminalreporter.write_line(f"{status}  {name}")
