import pytest
import torch

from deepbroadcast.config import expand_preset
from deepbroadcast.data import synthetic_dataset

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "failed": False, "ran": False, "why": ""})
    if report.when == "call" or report.failed or report.skipped:
        entry["ran"] = True
    if report.failed:
        entry["failed"] = True
        entry["why"] = str(report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash")
                           else report.longrepr).splitlines()[0][:160]
    elif report.skipped:
        entry["failed"] = True
        entry["why"] = "skipped"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "FAIL" if e["failed"] or not e["ran"] else "PASS"
        line = f"criterion {number}: {status}  {e['title']}"
        if status == "FAIL" and e["why"]:
            line += f"  [{e['why']}]"
        terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synth():
    return synthetic_dataset(n_train=512, n_test=128, seed=0)


@pytest.fixture
def small_case3(tmp_path):
    """case3 preset scaled down so an epoch runs in about a second."""
    from deepbroadcast.config import apply_overrides

    return apply_overrides(expand_preset("case3"), [
        "dataset=synthetic",
        "model.c1=4", "model.h1=2", "model.w1=2", "model.extractor_width=8", "model.decoder_width=16",
        "model.gcf_hidden=8", "model.fusion_hidden=16", "model.mtoc_hidden=32",
        "trainer.epochs=2", "trainer.batch_size=32", "trainer.max_train_items=256",
        "eval.max_test_items=64", "eval.repeats=2", "eval.grid=[-5, 7, 19]",
        f"output_dir={tmp_path / 'runs'}",
    ])
