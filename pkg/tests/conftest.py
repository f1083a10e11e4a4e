import random

import pytest

from sefl import ahe


@pytest.fixture(scope="session")
def keypair():
    return ahe.keygen(256, random.Random("tests:keypair"))


@pytest.fixture(scope="session")
def other_keypair():
    return ahe.keygen(256, random.Random("tests:other"))


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def fp():
    return ahe.FixedPointParams()


# --- acceptance reporting --------------------------------------------------

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed:
        crash = getattr(rep.longrepr, "reprcrash", None)
        detail = (crash.message if crash else str(rep.longrepr)).splitlines()[0]
    item.config.stash[_CRITERIA][number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
