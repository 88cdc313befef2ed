import pytest

from scan2num.phantom import PhantomSpec, generate_dataset

SMALL = PhantomSpec(dims=(32, 32, 32), semi_axes=(14.0, 13.0, 14.0))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """32 small phantoms with a stratified manifest: (manifest path, entries)."""
    out = tmp_path_factory.mktemp("small")
    path, entries, _ = generate_dataset(out, 32, seed=11, template=SMALL)
    return path, entries


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.failed:
        detail = dict(report.user_properties).get("detail", "")
        if not detail and report.failed:
            detail = str(report.longrepr).strip().splitlines()[-1]
        _CRITERIA.setdefault(name, ("PASS" if report.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        status, detail = _CRITERIA[name]
        num, label = name.split("_", 3)[2:]
        terminalreporter.write_line(f"criterion {int(num):2d} {status}  {label.replace('_', ' ')}: {detail}")
