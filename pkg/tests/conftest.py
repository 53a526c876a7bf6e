import numpy as np
import pytest

from congestnet.config import ModelConfig
from congestnet.grid import FeatureLayer, QueryLocation, TrafficRecord


def tiny_config(**kw) -> ModelConfig:
    """8x8 grid, T=4, narrow layers: the shape used by the gradient checks."""
    base = dict(height=8, width=8, time_points=4, d_mt=3, enc_hidden=3, d_ur=3, fusion_hidden=(4, 4),
                d_meta=4, map_hidden=(3, 3), d_loc=3, head_channels=(4, 4), sigma=2.0)
    base.update(kw)
    return ModelConfig(**base)


def random_layers(cfg: ModelConfig, rng, normalized=True) -> dict:
    def layer(m, c):
        data = rng.random((cfg.height, cfg.width, c)).astype(np.float32)
        return FeatureLayer(m, data, normalized=normalized)
    return {"media_text": layer("media_text", cfg.d_mt), "real_estate": layer("real_estate", cfg.d_re),
            "poi": layer("poi", cfg.d_pi)}


def random_records(cfg: ModelConfig, n: int, rng) -> list:
    cells = rng.choice(cfg.height * cfg.width, size=n, replace=False)
    return [TrafficRecord(QueryLocation.from_index(*divmod(int(c), cfg.width)),
                          rng.integers(0, 2, cfg.time_points).astype(np.uint8)) for c in sorted(cells)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------ acceptance summary

_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.failed or report.skipped:
        detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        prev = _CRITERIA.get(name)
        if prev is None or report.failed:
            _CRITERIA[name] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _CRITERIA[name]
        num = name.split("_")[2]
        label = " ".join(name.split("_")[3:])
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        line = f"criterion {num} ({label}): {status}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
