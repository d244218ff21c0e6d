import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def bisect_quantile(cdf, p, lo, hi, iters=200):
    """Independent inverse of a monotone CDF by bisection."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def type7_quantile(values, q):
    """Hyndman-Fan type 7 quantile from the sorted list, written out by hand."""
    s = sorted(values)
    h = (len(s) - 1) * q
    lo = int(h // 1)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


# --- acceptance criteria summary ----------------------------------------------------

_CRITERIA: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    entry = _CRITERIA.setdefault(marker.args[0], ["PASS", []])
    if rep.failed:
        entry[0] = "FAIL"
    elif rep.skipped and entry[0] == "PASS":
        entry[0] = "SKIP"
    entry[1] += [str(v) for k, v in rep.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(_CRITERIA):
        status, details = _CRITERIA[num]
        tail = f"  ({'; '.join(details)})" if details else ""
        terminalreporter.write_line(f"criterion {num:>2}: {status}{tail}")
