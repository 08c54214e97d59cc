"""Reconstruction objective: pixel MSE, frozen-feature perceptual loss, patch adversarial loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError, ValidationError

LOSS_NAMES = ("mse", "vgg", "gan")


@dataclass(frozen=True)
class LossWeights:
    w_mse: float = 1.0
    w_perc: float = 0.1
    w_adv: float = 0.01

    def __post_init__(self):
        vals = (self.w_mse, self.w_perc, self.w_adv)
        if any(v < 0 for v in vals):
            raise ValidationError(f"loss weights must be non-negative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValidationError("at least one loss weight must be positive")

    @classmethod
    def from_terms(cls, terms, base: "LossWeights | None" = None) -> "LossWeights":
        """Keep the weights of the named terms (``mse``, ``vgg``, ``gan``) and zero the rest."""
        base = base or cls()
        if isinstance(terms, str):
            terms = [t.strip() for t in terms.split(",") if t.strip()]
        unknown = set(terms) - set(LOSS_NAMES)
        if unknown:
            raise ConfigurationError(f"unknown loss terms {sorted(unknown)}; choose from {LOSS_NAMES}")
        return cls(
            base.w_mse if "mse" in terms else 0.0,
            base.w_perc if "vgg" in terms else 0.0,
            base.w_adv if "gan" in terms else 0.0,
        )


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_mse(recon: Tensor, target: Tensor) -> Tensor:
    _same_shape(recon, target)
    return ((recon - target) ** 2).mean()


class FeatureExtractor(nn.Module):
    """Frozen multi-tap feature network for the perceptual loss.

    ``kind="desk"``: three conv blocks with seeded random weights, tapped after
    each block. ``kind="vgg19"``: torchvision VGG19 layout tapped after the first
    three pooling stages; weights must be supplied as a state-dict file.
    """

    def __init__(self, kind: str = "desk", weights_path=None, seed: int = 1234, widths=(16, 32, 64)):
        super().__init__()
        self.kind = kind
        if kind == "desk":
            gen = torch.Generator().manual_seed(seed)
            blocks, c_in = [], 3
            for w in widths:
                conv = nn.Conv2d(c_in, w, 3, padding=1)
                with torch.no_grad():
                    bound = (6.0 / (9 * c_in)) ** 0.5
                    conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                    conv.bias.zero_()
                blocks.append(nn.Sequential(conv, nn.ReLU(), nn.AvgPool2d(2)))
                c_in = w
            self.blocks = nn.ModuleList(blocks)
        elif kind == "vgg19":
            from torchvision.models import vgg19

            if weights_path is None:
                raise ConfigurationError("the vgg19 perceptual extractor needs a weights file")
            net = vgg19(weights=None)
            net.load_state_dict(torch.load(weights_path, map_location="cpu"))
            feats = list(net.features.children())
            pools = [i for i, m in enumerate(feats) if isinstance(m, nn.MaxPool2d)][:3]
            starts = [0] + [p + 1 for p in pools[:-1]]
            self.blocks = nn.ModuleList(nn.Sequential(*feats[s : e + 1]) for s, e in zip(starts, pools))
        else:
            raise ConfigurationError(f"unknown feature extractor {kind!r}")
        self.min_size = 2 ** len(self.blocks)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # permanently in eval mode
        return super().train(False)

    def forward(self, x: Tensor) -> list[Tensor]:
        if min(x.shape[-2:]) < self.min_size:
            raise ValidationError(f"perceptual loss needs at least {self.min_size}px inputs, got {tuple(x.shape[-2:])}")
        mean = x.new_tensor((0.485, 0.456, 0.406)).view(1, 3, 1, 1)
        std = x.new_tensor((0.229, 0.224, 0.225)).view(1, 3, 1, 1)
        h = (x - mean) / std
        taps = []
        for block in self.blocks:
            h = block(h)
            taps.append(h)
        return taps


def loss_perceptual(recon: Tensor, target: Tensor, feat_net: FeatureExtractor) -> Tensor:
    """Sum over taps of the per-tap mean squared feature difference."""
    _same_shape(recon, target)
    total = recon.new_zeros(())
    for fr, ft in zip(feat_net(recon), feat_net(target)):
        total = total + ((fr - ft) ** 2).mean()
    return total


def loss_adversarial(d_real: Tensor, d_fake: Tensor, saturating: bool = False) -> tuple[Tensor, Tensor]:
    """Return ``(generator_loss, discriminator_loss)`` from patch logits.

    The generator term is the non-saturating ``-log sigmoid(d_fake)`` unless
    ``saturating`` asks for the literal ``log(1 - sigmoid(d_fake))``.
    """
    if not (torch.isfinite(d_real).all() and torch.isfinite(d_fake).all()):
        raise ValidationError("discriminator logits must be finite")
    disc = -(F.logsigmoid(d_real).mean() + F.logsigmoid(-d_fake).mean())
    gen = F.logsigmoid(-d_fake).mean() if saturating else -F.logsigmoid(d_fake).mean()
    return gen, disc


def total_loss(
    recon: Tensor,
    target: Tensor,
    fake_logits: Tensor | None,
    weights: LossWeights,
    feat_net: FeatureExtractor | None = None,
    saturating: bool = False,
) -> tuple[Tensor, dict]:
    """Weighted sum of the enabled terms, plus each term as a float for logging."""
    zero = recon.new_zeros(())
    l_mse = loss_mse(recon, target) if weights.w_mse > 0 else zero
    if weights.w_perc > 0:
        if feat_net is None:
            raise ConfigurationError("perceptual term enabled without a feature extractor")
        l_vgg = loss_perceptual(recon, target, feat_net)
    else:
        l_vgg = zero
    if weights.w_adv > 0:
        if fake_logits is None:
            raise ConfigurationError("adversarial term enabled without discriminator logits")
        l_gan = loss_adversarial(fake_logits.new_zeros(()), fake_logits, saturating)[0]
    else:
        l_gan = zero
    total = weights.w_mse * l_mse + weights.w_perc * l_vgg + weights.w_adv * l_gan
    return total, {"L_mse": l_mse.item(), "L_vgg": l_vgg.item(), "L_gan_g": l_gan.item(), "total": total.item()}
