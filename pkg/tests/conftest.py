import pytest

from pwleq.channel import build_dataset, identity_config
from pwleq.training import TrainConfig, pretrain, split_dataset

IDENTITY_TC = TrainConfig(epochs=40, hidden=8, seed=0, batch_size=16, lr=1e-2, patience=40)

_CRITERIA: dict[str, str] = {}


@pytest.fixture(scope="session")
def identity_run():
    """A small equalizer trained on the distortion-free, noiseless link."""
    ds = build_dataset(identity_config(n_symbols=61 * 400 + 20))
    params, logbook = pretrain(ds, IDENTITY_TC)
    return ds, params, logbook, split_dataset(ds, IDENTITY_TC)


@pytest.fixture(scope="session")
def record_criterion():
    """Stores one pass/fail line per acceptance criterion for the summary."""

    def record(key: str, passed: bool, detail: str) -> None:
        line = f"criterion {key}: {'PASS' if passed else 'FAIL'} | {detail}"
        _CRITERIA[key] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[key])
