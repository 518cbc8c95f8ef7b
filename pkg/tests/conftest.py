import numpy as np
import pytest

from mctta.dsp import MelConfig, NormStats
from mctta.harness import SyntheticDatasetSpec, build_model
from mctta.toy_alm import PretrainConfig, ToyALM, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_random_model(seed=0, n_classes=4, prefix=2, d=16, n_mels=8, max_len=16, pos_scale=0.3):
    rng = np.random.default_rng(seed)
    params = init_params(
        rng, prefix + n_classes, n_mels=n_mels, d=d, d_text=d, max_len=max_len,
        text_hidden=d, audio_hidden=d, pos_scale=pos_scale,
    )
    prompts = [list(range(prefix)) + [prefix + c] for c in range(n_classes)]
    return ToyALM(params, NormStats.identity(n_mels), prompts, 0.07, MelConfig())


@pytest.fixture
def random_model():
    return make_random_model()


@pytest.fixture(scope="session")
def pretrained():
    """Default 8-class backbone shared by the slower tests."""
    model, acc = build_model(SyntheticDatasetSpec(), seed=0)
    return model, acc


# -- acceptance reporting ------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    detail = getattr(item, "criterion_detail", "")
    _CRITERIA[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {status}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)


@pytest.fixture
def detail(request):
    """Attach a short measurement to the acceptance line of the running test."""

    def record(text: str) -> None:
        request.node.criterion_detail = text

    return record
