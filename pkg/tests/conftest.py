import time

import pytest

from pro_ood.pipeline import run_pipeline


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One full desk pipeline run shared by every test that needs a trained model."""
    out = tmp_path_factory.mktemp("desk_a")
    t0 = time.perf_counter()
    summary = run_pipeline(out)
    summary["wall_seconds"] = time.perf_counter() - t0
    return out, summary
