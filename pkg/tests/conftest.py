import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def within_se(est, truth, se, k):
    """|est - truth| <= k * se elementwise."""
    est, truth, se = np.broadcast_arrays(np.asarray(est, float),
                                         np.asarray(truth, float),
                                         np.asarray(se, float))
    return np.all(np.abs(est - truth) <= k * se)


_CRITERIA = []


@pytest.fixture
def report(request):
    """Print one PASS/FAIL line per acceptance criterion, past capture."""
    tr = request.config.pluginmanager.get_plugin('terminalreporter')

    def emit(k, ok, detail):
        line = f'criterion {k}: {"PASS" if ok else "FAIL"}  {detail}'
        _CRITERIA.append(line)
        print(line)
        if tr is not None:
            tr.write_line('')
            tr.write_line(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section('acceptance criteria')
        for line in _CRITERIA:
            terminalreporter.write_line(line)
