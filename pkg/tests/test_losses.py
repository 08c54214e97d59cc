import math

import pytest
import torch

from cadis.errors import ConfigurationError, ValidationError
from cadis.losses import FeatureExtractor, LossWeights, loss_adversarial, loss_mse, loss_perceptual, total_loss


def test_mse_values():
    a = torch.rand(2, 3, 8, 8)
    assert loss_mse(a, a).item() == 0.0
    recon = torch.tensor([[[[0.0, 1.0]]]])
    target = torch.tensor([[[[1.0, 1.0]]]])
    assert loss_mse(recon, target).item() == pytest.approx(0.5)
    b = torch.rand(2, 3, 8, 8)
    assert loss_mse(a, b).item() == loss_mse(b, a).item()
    assert loss_mse(a, b).item() > 0
    with pytest.raises(ValidationError):
        loss_mse(a, b[:, :2])


def test_perceptual_properties():
    feat = FeatureExtractor("desk")
    a, b = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    assert loss_perceptual(a, a, feat).item() == 0.0
    assert loss_perceptual(a, b, feat).item() == pytest.approx(loss_perceptual(b, a, feat).item(), rel=1e-6)
    assert loss_perceptual(a, a + 1e-3, feat).item() > 0
    with pytest.raises(ValidationError):
        loss_perceptual(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4), feat)


def test_perceptual_frozen_gradient():
    feat = FeatureExtractor("desk")
    feat.train()  # must stay in eval mode and frozen
    assert not feat.training
    recon = torch.rand(1, 3, 16, 16, requires_grad=True)
    loss_perceptual(recon, torch.rand(1, 3, 16, 16), feat).backward()
    assert recon.grad is not None and recon.grad.abs().sum() > 0
    for p in feat.parameters():
        assert not p.requires_grad
        assert p.grad is None or p.grad.abs().sum() == 0


def test_feature_extractor_seeded():
    a, b = FeatureExtractor("desk", seed=7), FeatureExtractor("desk", seed=7)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    with pytest.raises(ConfigurationError):
        FeatureExtractor("vgg19")
    with pytest.raises(ConfigurationError):
        FeatureExtractor("alexnet")


def test_vgg19_extractor_with_supplied_weights(tmp_path):
    from torchvision.models import vgg19

    torch.save(vgg19(weights=None).state_dict(), tmp_path / "vgg19.pth")
    feat = FeatureExtractor("vgg19", tmp_path / "vgg19.pth")
    taps = feat(torch.rand(1, 3, 32, 32))
    assert [t.shape[1] for t in taps] == [64, 128, 256]
    assert [t.shape[-1] for t in taps] == [16, 8, 4]


def test_adversarial_reference_values():
    z = torch.zeros(1, 1, 6, 6)
    gen, disc = loss_adversarial(z, z)
    assert disc.item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert gen.item() == pytest.approx(math.log(2), abs=1e-6)
    big = torch.full((1, 1, 2, 2), 60.0)
    _, disc = loss_adversarial(big, -big)
    assert disc.item() < 1e-20
    # literal form: log(1 - sigmoid(0)) = -ln 2
    gen_sat, _ = loss_adversarial(z, z, saturating=True)
    assert gen_sat.item() == pytest.approx(-math.log(2), abs=1e-6)
    with pytest.raises(ValidationError):
        loss_adversarial(torch.tensor([float("nan")]), z)


def test_adversarial_stable_at_extremes():
    x = torch.tensor([-200.0, 200.0], requires_grad=True)
    gen, disc = loss_adversarial(x, x)
    (gen + disc).backward()
    assert torch.isfinite(gen) and torch.isfinite(disc) and torch.isfinite(x.grad).all()


def test_loss_weights_validation():
    with pytest.raises(ValidationError):
        LossWeights(0, 0, 0)
    with pytest.raises(ValidationError):
        LossWeights(-1, 0, 1)
    assert LossWeights.from_terms("mse,gan") == LossWeights(1.0, 0.0, 0.01)
    with pytest.raises(ConfigurationError):
        LossWeights.from_terms("mse,lpips")


@pytest.mark.parametrize(
    "terms", ["mse", "mse,vgg", "mse,gan", "vgg,gan", "mse,vgg,gan"]
)
def test_ablation_combinations(terms):
    w = LossWeights.from_terms(terms)
    feat = FeatureExtractor("desk")
    recon, target = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    logits = torch.randn(2, 1, 2, 2)
    total, parts = total_loss(recon, target, logits, w, feat)
    expected = (
        w.w_mse * loss_mse(recon, target)
        + w.w_perc * loss_perceptual(recon, target, feat)
        + w.w_adv * loss_adversarial(torch.zeros(()), logits)[0]
    )
    assert total.item() == pytest.approx(expected.item(), rel=1e-6)
    for name, key in (("mse", "L_mse"), ("vgg", "L_vgg"), ("gan", "L_gan_g")):
        assert (parts[key] > 0) == (name in terms)


def test_total_loss_special_cases():
    recon, target = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    total, _ = total_loss(recon, target, None, LossWeights(1, 0, 0))
    assert total.item() == loss_mse(recon, target).item()
    total, _ = total_loss(recon, recon, None, LossWeights(1, 1, 0), FeatureExtractor("desk"))
    assert total.item() == 0.0
    with pytest.raises(ConfigurationError):
        total_loss(recon, target, None, LossWeights(1, 1, 0))
    with pytest.raises(ConfigurationError):
        total_loss(recon, target, None, LossWeights(1, 0, 1))
