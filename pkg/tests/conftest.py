import json

import pytest

from anatgraph import cli

TINY_RUN = {
    "seed": 3,
    "data": {"atlas_dims": [32, 32, 32], "n_subjects": 4, "lesion_box": [[0, 0, 0], [16, 32, 32]]},
    "train": {"t_max": 2, "batch_patch": 4, "batch_graph": 4, "patch_queue": 8, "graph_queue": 8},
}


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    path.write_text(json.dumps(TINY_RUN))
    return path


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("cohort")
    assert cli.main(["synth", str(out), "--config", str(tiny_config)]) == 0
    return out


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_config, tiny_cohort):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", str(tiny_cohort), str(out), "--config", str(tiny_config), "--workers", "1"]) == 0
    return out


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def report():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
