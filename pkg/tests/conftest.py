import numpy as np
import pytest

from lipauth import siamese, synthgen

TINY_SYNTH = synthgen.SynthConfig(speakers=3, phrases=2, utterances=3, frames=3, height=16, width=16)
TINY_ARCH = siamese.Architecture(frames=3, height=16, width=16, channels=(2, 2, 2), hidden=(2, 2),
                                 embed_dim=4)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """3 speakers x 2 phrases x 3 utterances of 3x16x16 frames."""
    root = tmp_path_factory.mktemp("corpus")
    return synthgen.gen_corpus(TINY_SYNTH, root)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    siamese.save_checkpoint(path, siamese.init_params(0, TINY_ARCH), TINY_ARCH)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion

_criteria = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[props["criterion"]] = (report.outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split(".")[0])):
        outcome, detail = _criteria[name]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}: {detail}")
