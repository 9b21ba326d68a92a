import numpy as np
import pytest

from freelb_lab.model import Batch, ModelConfig, init_params
from freelb_lab.tensor import RngState

from acceptance_log import ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:>2} {name}  {detail}")


def make_batch(rng: RngState, n=4, seq=6, vocab=50, lengths=None, num_classes=2):
    """Random batch with a CLS-like id at position 0 and right padding."""
    gen = rng.generator
    if lengths is None:
        lengths = gen.integers(2, seq + 1, n)
    ids = np.zeros((n, seq), dtype=np.int64)
    for i, L in enumerate(lengths):
        ids[i, 0] = 2
        ids[i, 1:L] = gen.integers(3, vocab, L - 1)
    mask = (ids != 0).astype(float)
    labels = gen.integers(0, num_classes, n)
    return Batch(ids, mask, labels)


@pytest.fixture
def tiny():
    """A d=8, 1-block, vocab-50 model with a padded batch."""
    cfg = ModelConfig(vocab_size=50, dim=8, heads=2, blocks=1, ff_dim=16, max_len=8, dropout=0.1)
    params = init_params(cfg, RngState(11).child("init"))
    batch = make_batch(RngState(12), n=3, seq=6, lengths=[6, 4, 2])
    return cfg, params, batch


@pytest.fixture
def small():
    """Two blocks, for split-point tests."""
    cfg = ModelConfig(vocab_size=30, dim=8, heads=2, blocks=2, ff_dim=12, max_len=8, dropout=0.2)
    params = init_params(cfg, RngState(21).child("init"))
    batch = make_batch(RngState(22), n=4, seq=7, vocab=30)
    return cfg, params, batch
