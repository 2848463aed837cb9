import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "scripts"))

from make_desk_data import write_desk_data  # noqa: E402

# criterion id -> (passed, detail); passed is None for a criterion not run.
# Filled by tests/test_acceptance.py.
ACCEPTANCE: dict[int, tuple[bool | None, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_dir(tmp_path_factory):
    """25 grayscale 180x180 PGM crops; the last 5 are the validation hold-out."""
    out = tmp_path_factory.mktemp("desk")
    write_desk_data(out)
    return out


@pytest.fixture(scope="session")
def desk_models(tmp_path_factory, desk_dir):
    """Lazily trained desk-scale ST models, one per noise level, shared by tests."""
    from desk_scale import desk_config, run

    cache: dict[float, tuple[Path, dict]] = {}

    def get(sigma: float):
        if sigma not in cache:
            out = tmp_path_factory.mktemp(f"desk_sigma{sigma:g}")
            summary = run(str(desk_dir), str(out), desk_config(sigma))
            cache[sigma] = (out / "model.linn", summary)
        return cache[sigma]

    return get


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        status = "NOT RUN" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {cid:2d}: {status}  {detail}")
