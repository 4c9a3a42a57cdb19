import pytest
import torch

from nerfdistill.rendering import RenderConfig
from nerfdistill.teacher import TeacherConfig, build_teacher


def tiny_teacher_config(kind: str = "random", **kw) -> TeacherConfig:
    base = dict(kind=kind, w_dim=16, mapping_layers=2, plane_resolution=16, plane_channels=8,
                synthesis_channel_base=128, synthesis_channel_max=16, decoder_hidden=16, low_res=8,
                sr_hidden=8, render=RenderConfig(n_coarse=8, n_fine=8))
    base.update(kw)
    return TeacherConfig(**base)


@pytest.fixture(scope="session")
def tiny_teacher():
    return build_teacher(tiny_teacher_config())


@pytest.fixture(scope="session")
def tiny_procedural_teacher():
    return build_teacher(tiny_teacher_config("procedural", plane_channels=16))


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


# acceptance bookkeeping: criterion number -> (title, list of outcomes)
_CRITERIA = {}


def pytest_collection_modifyitems(config, items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA.setdefault(mark.args[0], [mark.args[1], []])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        _CRITERIA[mark.args[0]][1].append(not failed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, results = _CRITERIA[number]
        status = "NOT RUN" if not results else "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}")
