import time

import pytest

from frozenadv.harness import ExperimentConfig, Workdir, get_dataset, get_heads, get_upstream


@pytest.fixture(scope="session")
def default_cfg():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def pipeline(default_cfg, tmp_path_factory):
    """Dataset, pretrained encoders and heads of the shipped default config, with stage timings."""
    wd = Workdir(tmp_path_factory.mktemp("pipeline"))
    t0 = time.perf_counter()
    ds = get_dataset(default_cfg, wd)
    models = {a: get_upstream(default_cfg, wd, a, ds) for a in ("a", "b")}
    heads = {a: get_heads(default_cfg, wd, a, ds, models[a]) for a in ("a", "b")}
    return {"cfg": default_cfg, "workdir": wd, "dataset": ds, "models": models, "heads": heads,
            "seconds": time.perf_counter() - t0}


def pytest_terminal_summary(terminalreporter):
    import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
