import numpy as np
import pytest
import torch

from seq2seq_mri.generator.model import GeneratorConfig, Seq2SeqGenerator


def tiny_config(**kw) -> GeneratorConfig:
    base = dict(n_sequences=3, in_channels=1, out_channels=1, base_channels=4, latent_channels=8,
                n_residual_blocks=1, n_hyper_residual_blocks=1, bank_dim=4)
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture
def tiny_generator():
    torch.manual_seed(0)
    return Seq2SeqGenerator(tiny_config()).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _restore_determinism_flag():
    # trainers toggle a process-wide torch flag; keep tests independent
    before = torch.are_deterministic_algorithms_enabled()
    yield
    torch.use_deterministic_algorithms(before)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.CRITERIA):
        status, detail = mod.RESULTS.get(n, ("NOT RUN", ""))
        terminalreporter.write_line(f"criterion {n} {mod.CRITERIA[n]}: {status} {detail}".rstrip())
