import numpy as np
import pytest

from aptune import numerics as nx
from aptune.data import Example, collate
from aptune.numerics import Tape, Tensor
from aptune.transformer import Backbone, ModelConfig


def grad_check(loss_fn, params, eps=1e-4):
    """Analytic vs central-difference gradients of ``loss_fn()`` for each
    tensor in ``params``; returns the relative errors."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    errors = []
    for p in params:
        numeric = nx.finite_diff_grad(lambda: float(loss_fn().data), p, eps)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors.append(nx.relative_error(analytic, numeric))
    return errors


def random_projection_loss(out: Tensor, seed: int = 0) -> Tensor:
    weights = np.random.default_rng(seed).normal(size=out.shape)
    return nx.sum_all(nx.mul(out, weights))


def small_config(**kw) -> ModelConfig:
    base = dict(num_layers=2, num_heads=2, model_dim=8, ffn_dim=16, vocab_size=20, max_seq_len=12, prefix_len=3)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, n=3, vocab=20, min_len=2, max_len=6, kind="sequence", num_labels=2):
    examples = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        toks = tuple(int(t) for t in rng.integers(3, vocab, size=length))
        label = int(rng.integers(0, num_labels)) if kind == "sequence" else tuple(
            int(t) for t in rng.integers(0, num_labels, size=length))
        examples.append(Example(toks, label))
    return collate(examples, kind)


@pytest.fixture
def backbone64():
    cfg = small_config()
    return cfg, Backbone.init(cfg, seed=7, dtype=np.float64)


# acceptance criteria report: one line per criterion in the terminal summary
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}" + (f" ({detail})" if detail else ""))
