import numpy as np
import pytest

from bridgets import _accel

BACKENDS = ["numpy"] + (["numba"] if _accel.HAS_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = _accel.backend()
    _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    num, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    prev_ok, _, prev_detail = item.config._criteria.get(num, (True, title, ""))
    ok = prev_ok and (rep.passed or rep.skipped)
    item.config._criteria[num] = (ok, title, "; ".join(filter(None, [prev_detail, detail])))


def pytest_terminal_summary(terminalreporter, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(crit):
        ok, title, detail = crit[num]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{status} criterion {num:2d}: {title}" + (f" [{detail}]" if detail else ""))
