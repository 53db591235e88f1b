"""Fast invariant checks that need no data or pretrained weights."""
from __future__ import annotations

import tempfile
import time
import traceback
from pathlib import Path

import numpy as np
import torch

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


@check
def hyperconv_slice_selection():
    from .generator.hyperconv import HyperConv, one_hot

    torch.manual_seed(0)
    layer = HyperConv(4, 3, 5, bank_dim=6).double()
    s = one_hot(2, 4, torch.float64)
    f = layer.embed(s)
    expected = sum(layer.bank[..., c] * f[c] for c in range(6))
    assert torch.allclose(layer.kernel(s), expected, atol=1e-12)
    a, b = torch.randn(6, dtype=torch.float64), torch.randn(6, dtype=torch.float64)
    lin = layer.kernel_from_embedding(2 * a - 3 * b)
    assert torch.allclose(lin, 2 * layer.kernel_from_embedding(a) - 3 * layer.kernel_from_embedding(b))


@check
def hyperconv_batched_codes():
    from .generator.hyperconv import HyperConv, one_hot

    torch.manual_seed(1)
    layer = HyperConv(3, 2, 4, bank_dim=5)
    x = torch.randn(3, 2, 8, 8)
    codes = torch.stack([one_hot(k, 3) for k in (0, 2, 1)])
    y = layer(x, codes)
    for k in range(3):
        assert torch.allclose(y[k], layer(x[k:k + 1], codes[k])[0], atol=1e-5)


@check
def gradient_matches_finite_differences():
    from .generator.hyperconv import HyperConv, one_hot

    torch.manual_seed(2)
    layer = HyperConv(2, 1, 2, bank_dim=3).double()
    x = torch.randn(1, 1, 5, 5, dtype=torch.float64, requires_grad=True)
    s = one_hot(1, 2, torch.float64)
    assert torch.autograd.gradcheck(lambda inp: layer(inp, s), (x,))


@check
def generator_shapes():
    from .generator.model import GeneratorConfig, Seq2SeqGenerator

    torch.manual_seed(3)
    g = Seq2SeqGenerator(GeneratorConfig(n_sequences=3, in_channels=1, out_channels=1, base_channels=4,
                                         latent_channels=8, n_residual_blocks=1,
                                         n_hyper_residual_blocks=1, bank_dim=4))
    with torch.no_grad():
        y = g(torch.rand(2, 2, 1, 16, 16), 1, t_out=3)
    assert y.shape == (2, 3, 1, 16, 16)
    assert float(y.min()) >= 0 and float(y.max()) <= 1


@check
def metric_identities():
    from .metrics import LpipsLike, psnr, ssim

    rng = np.random.default_rng(0)
    x = rng.random((16, 16))
    assert psnr(x, x) == 100.0
    assert abs(ssim(x, x) - 1) < 1e-12
    assert LpipsLike("random")(x, x) == 0.0
    assert abs(psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) - 20.0) < 1e-9


@check
def centrality_hand_example():
    from .diffrep import centrality

    a = np.array([[0, 2, 1], [0, 0, 1], [0, 0, 0]], dtype=float)
    rep = centrality(a)
    assert np.allclose(rep.c_t, [1, 1 / 3, 0])
    assert np.allclose(rep.c_d, [0, -2 / 3, -2 / 3])
    assert list(rep.rank_t) == [1, 2, 3] and list(rep.rank_d) == [1, 2, 3]


@check
def loss_identities():
    from .objectives import LossWeights, cycle_loss, reconstruction_loss

    x = torch.rand(2, 1, 3, 8, 8)
    w = LossWeights(lambda_p=0)
    assert float(reconstruction_loss(x, x, w)) == 0.0
    assert float(cycle_loss(x, x)) == 0.0
    assert abs(float(reconstruction_loss(torch.zeros_like(x), torch.ones_like(x), w)) - 10.0) < 1e-7


@check
def toy_subject_is_reproducible():
    from .toy.sim import difference_mask, generate_subject

    a, b = generate_subject(7), generate_subject(7)
    assert np.array_equal(a.x1.data, b.x1.data) and np.array_equal(a.x2.data, b.x2.data)
    assert a.label1 != a.label2
    assert difference_mask(a).any()


@check
def checkpoint_roundtrip():
    from .generator.model import GeneratorConfig
    from .trainer import OptimConfig, TrainConfig, Trainer, load_generator, save_checkpoint

    cfg = TrainConfig(deterministic=False, model=GeneratorConfig(
        n_sequences=2, in_channels=1, out_channels=1, base_channels=4, latent_channels=8,
        n_residual_blocks=1, n_hyper_residual_blocks=1, bank_dim=4), train=OptimConfig(steps=1))
    cfg.loss.lambda_p = 0
    trainer = Trainer(cfg)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(Path(tmp) / "c.pt", trainer)
        g = load_generator(path)
    for k, v in trainer.generator.state_dict().items():
        assert torch.equal(v, g.state_dict()[k]), k


def run_selftest(verbose: bool = False) -> bool:
    ok = True
    for fn in CHECKS:
        t0 = time.perf_counter()
        try:
            fn()
            status = "PASS"
        except Exception:  # noqa: BLE001 - report every failing check
            ok, status = False, "FAIL"
            if verbose:
                traceback.print_exc()
        if verbose:
            print(f"{status} {fn.__name__} ({time.perf_counter() - t0:.2f}s)")
    return ok
