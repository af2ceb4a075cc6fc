import pytest

from hybridmatch.decision import GridSpec, TrainParams, build_training_grid, train
from hybridmatch.market import LogNormalParams, MarketConfig

# criterion number -> (passed, detail); filled by the acceptance module
CRITERIA: dict[int, tuple[bool, str]] = {}

DESK = dict(lam=100.0, T=100.0, T0=50.0)


def record(num: int, passed: bool, detail: str):
    CRITERIA[num] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        ok, detail = CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def desk_market():
    return MarketConfig.from_density(8.0, DESK["lam"], T=DESK["T"], T0=DESK["T0"], seed=20240101,
                                     departure=LogNormalParams(-0.8, 0.3))


@pytest.fixture(scope="session")
def calibrated(desk_market):
    """Default grid labelled at desk scale plus the model trained on it."""
    grid = GridSpec()
    samples = build_training_grid(grid, desk_market, k=10)
    model, report = train(samples, TrainParams())
    return grid, samples, model, report
