import pytest
import torch

from hsiseg.backbone import NetworkConfig, build_network
from hsiseg.training import set_determinism

set_determinism()


@pytest.fixture
def micro_config():
    return NetworkConfig(base_width=2, depth=2, num_categories=2)


@pytest.fixture
def micro_net(micro_config):
    return build_network(micro_config, seed=3).double()


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def tiny_bench():
    from hsiseg.synthdata import BenchmarkConfig, make_benchmark

    cfg = BenchmarkConfig(master_seed=5, n_train=6, n_val=2, n_test=4)
    return cfg, make_benchmark(cfg)


@pytest.fixture(scope="session")
def tiny_protocol(tiny_bench):
    """Factory for a 3-stage micro protocol (width 2, one epoch per stage)."""
    from hsiseg.stagerunner import default_protocol

    def make(method="hsi", **kw):
        cfg = default_protocol(tiny_bench[1], method, epochs=1, batch_size=3, **kw)
        cfg.network = NetworkConfig(base_width=2, depth=2)
        return cfg

    return make


@pytest.fixture(scope="session")
def tiny_stage0(tiny_protocol):
    from hsiseg.stagerunner import train_initial

    return train_initial(tiny_protocol())


# one PASS/FAIL line per acceptance criterion, printed after the run
_CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion the test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    _CRITERIA.setdefault(n, (title, []))[1].append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[n]
        status = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2} {status}  {title}")
