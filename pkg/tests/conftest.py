import numpy as np
import pytest

from femodels.panel_data import CsvSchema, PanelDataset

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Append ``(criterion, passed, detail)`` lines shown in the terminal summary."""

    def record(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


def make_panel(n_ind=30, n_scen=4, n_alt=3, n_socio=2, n_vars=1, seed=0, n_classes=None):
    """Small random panel with ``x{i}_{v}`` variables and ``s{q}`` socio columns."""
    rng = np.random.default_rng(seed)
    socio = rng.normal(size=(n_ind, n_socio))
    n_obs = n_ind * n_scen
    x = rng.normal(size=(n_obs, n_alt, n_vars))
    J = n_alt if n_classes is None else n_classes
    schema = CsvSchema(
        "id", "y", tuple(f"s{q}" for q in range(n_socio)),
        tuple(tuple(f"x{i}_{v}" for v in range(n_vars)) for i in range(n_alt)),
        n_classes=n_classes,
    )
    return PanelDataset(
        individual=np.repeat(np.arange(n_ind), n_scen),
        individual_ids=tuple(f"i{n}" for n in range(n_ind)),
        socio=socio,
        alt_vars=x,
        target=rng.integers(0, J, size=n_obs),
        schema=schema,
    )
