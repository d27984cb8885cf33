import pytest

from mycoclip.captions import CaptionConstraints
from mycoclip.dataset import DatasetConfig, build_dataset, load_dataset

# filled by test_acceptance; printed once at the end of the run
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """30 images (10 per class), 20 captions per class."""
    root = tmp_path_factory.mktemp("small")
    cfg = DatasetConfig(count_per_class=10, master_seed=1, captions=CaptionConstraints(total=20, batch_size=10))
    build_dataset(cfg, out_dir=root)
    return root


@pytest.fixture()
def small_view(small_dataset):
    return load_dataset(small_dataset)
