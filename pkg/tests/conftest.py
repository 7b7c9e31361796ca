import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from laser_ctr.harness.model import LaserCTRClassifier  # noqa: E402
from laser_ctr.harness.synth import SynthConfig, gen_synthetic  # noqa: E402

SMALL_SYNTH = dict(n_users=60, n_items=200, history_len=(120, 160), seed=3)
SMALL_MODEL = dict(seq_len=100, embed_dim=16, qk_dim=8, hidden=16, epochs=1, optimizer="adam",
                   learning_rate=0.003, batch_size=64)


@pytest.fixture(scope="session")
def small_corpus():
    return gen_synthetic(SynthConfig(**SMALL_SYNTH))


@pytest.fixture(scope="session")
def small_checkpoint(small_corpus, tmp_path_factory):
    """A briefly trained model saved to disk, shared by the serving tests."""
    (Xtr, ytr), _ = small_corpus.split(seq_len=SMALL_MODEL["seq_len"])
    model = LaserCTRClassifier(**SMALL_MODEL).fit(Xtr, ytr)
    path = str(tmp_path_factory.mktemp("ckpt") / "model.lasr")
    model.save(path)
    return path


ACCEPTANCE = {}


@pytest.fixture
def record():
    """``record(n, title, ok, detail)`` stores one criterion outcome for the summary."""

    def _record(n, title, ok, detail=""):
        ACCEPTANCE[n] = (title, bool(ok), detail)
        print(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
