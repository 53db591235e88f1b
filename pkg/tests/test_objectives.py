import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from seq2seq_mri.errors import ConfigError, ShapeError
from seq2seq_mri.objectives import (
    DiscriminatorBank,
    FeatureExtractor,
    LossWeights,
    PatchDiscriminator,
    adversarial_losses,
    cycle_loss,
    discriminator_loss,
    generator_adv_loss,
    perceptual_loss,
    reconstruction_loss,
    set_requires_grad,
)
from seq2seq_mri.toy.sim import generate_subject

L1_ONLY = LossWeights(lambda_p=0.0)


class ConstantD(torch.nn.Module):
    """Scores real images with ``on_real`` and everything else with ``on_fake``."""

    def __init__(self, real, on_real, on_fake):
        super().__init__()
        self.real, self.on_real, self.on_fake = real, on_real, on_fake

    def forward(self, x):
        v = self.on_real if torch.equal(x, self.real) else self.on_fake
        return torch.full((x.shape[0], 1, 2, 2), float(v))


@pytest.fixture(scope="module")
def extractor():
    return FeatureExtractor("random")


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_r, w.lambda_p) == (10.0, 0.01)
    with pytest.raises(ConfigError):
        LossWeights(lambda_r=-1)


def test_reconstruction_identity_and_closed_form():
    x = torch.rand(2, 1, 3, 16, 16, dtype=torch.float64) * 0.8
    assert reconstruction_loss(x, x, L1_ONLY).item() == 0.0
    assert reconstruction_loss(x + 0.1, x, L1_ONLY).item() == pytest.approx(1.0, abs=1e-7)
    with pytest.raises(ShapeError):
        reconstruction_loss(x, x[..., :8], L1_ONLY)
    with pytest.raises(ConfigError):
        reconstruction_loss(x, x, LossWeights(), extractor=None)


def test_reconstruction_with_perceptual_term(extractor):
    x = torch.rand(1, 1, 3, 32, 32)
    assert reconstruction_loss(x, x, LossWeights(), extractor).item() == 0.0
    y = torch.rand(1, 1, 3, 32, 32)
    expected = 10 * (x - y).abs().mean() + 0.01 * perceptual_loss(x, y, extractor)
    assert reconstruction_loss(x, y, LossWeights(), extractor).item() == pytest.approx(expected.item(), rel=1e-6)


def test_perceptual_identity_symmetry_and_glyph(extractor):
    s = generate_subject(4)
    a = torch.from_numpy(s.x1.data)[None, None]
    b = torch.from_numpy(s.x2.data)[None, None]
    assert perceptual_loss(a, a, extractor).item() == 0.0
    assert perceptual_loss(a, b, extractor).item() == pytest.approx(perceptual_loss(b, a, extractor).item())
    # swap only the differing glyph region: same palette, different letter
    other = generate_subject(4)
    box = s.layout["diff_box"]
    y, x, h, w = box
    c = a.clone()
    c[..., y:y + h, x:x + w] = torch.flip(c[..., y:y + h, x:x + w], dims=(-1,))
    assert perceptual_loss(a, c, extractor).item() > 0
    assert other.label1 == s.label1


def test_perceptual_three_channel_and_bad_channels(extractor):
    x = torch.rand(2, 3, 16, 16)
    assert perceptual_loss(x, x, extractor).item() == 0.0
    with pytest.raises(ShapeError):
        extractor(torch.rand(1, 2, 16, 16))


def test_missing_vgg19_weights_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="random"):
        FeatureExtractor("vgg19", weights=tmp_path / "nope.pth")
    with pytest.raises(ConfigError):
        FeatureExtractor("resnet")


def test_random_extractor_is_frozen_and_seeded():
    a, b = FeatureExtractor("random"), FeatureExtractor("random")
    assert all(not p.requires_grad for p in a.parameters())
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    a.train()
    assert not a.training


def test_lsgan_closed_forms():
    real, fake = torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8)
    perfect = ConstantD(real, 1.0, 0.0)
    assert discriminator_loss(perfect, real, fake).item() == 0.0
    half = ConstantD(real, 0.5, 0.5)
    d, g = adversarial_losses(real, fake, half)
    assert d.item() == pytest.approx(0.5, abs=1e-7)
    assert g.item() == pytest.approx(0.25, abs=1e-7)
    assert generator_adv_loss(ConstantD(real, 0.0, 1.0), fake).item() == 0.0
    assert generator_adv_loss(ConstantD(real, 0.0, 0.9), fake).item() > 0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_cycle_constant_images(c1, c2):
    a = torch.full((1, 1, 1, 4, 4), c1, dtype=torch.float64)
    b = torch.full((1, 1, 1, 4, 4), c2, dtype=torch.float64)
    assert cycle_loss(a, b).item() == pytest.approx(abs(c1 - c2), abs=1e-7)
    assert cycle_loss(a, a).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_non_negative(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.rand(1, 1, 8, 8, generator=g), torch.rand(1, 1, 8, 8, generator=g)
    assert reconstruction_loss(a, b, L1_ONLY).item() >= 0
    assert cycle_loss(a, b).item() >= 0
    if not torch.equal(a, b):
        assert reconstruction_loss(a, b, L1_ONLY).item() > 1e-7


def test_discriminator_bank_and_patch_shape():
    bank = DiscriminatorBank(4, 3, 8)
    assert len(bank) == 4
    assert bank[0](torch.rand(2, 3, 128, 128)).shape == (2, 1, 14, 14)
    # receptive field of the conv stack: r += (k - 1) * jump, jump *= stride
    r, jump = 1, 1
    for m in PatchDiscriminator(1, 4).net:
        if isinstance(m, torch.nn.Conv2d):
            r += (m.kernel_size[0] - 1) * jump
            jump *= m.stride[0]
    assert r == 70


def test_gradients_do_not_cross_sides():
    torch.manual_seed(0)
    D = PatchDiscriminator(1, 4)
    gen = torch.nn.Conv2d(1, 1, 3, padding=1)
    x = torch.rand(1, 1, 32, 32)
    real = torch.rand(1, 1, 32, 32)
    fake = gen(x)
    discriminator_loss(D, real, fake).backward()
    assert gen.weight.grad is None
    assert D.net[0].weight.grad is not None
    D.zero_grad(set_to_none=True)
    set_requires_grad(D, False)
    generator_adv_loss(D, gen(x)).backward()
    assert all(p.grad is None for p in D.parameters())
    assert gen.weight.grad is not None and gen.weight.grad.abs().sum() > 0
