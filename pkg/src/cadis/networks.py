"""Network blocks: encoders, causal modulation layer, FiLM U-Net, patch discriminator, regression head.

All image tensors are ``(B, C, H, W)`` with values in [0, 1]; normalisation
happens inside the encoders.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError, ValidationError

_MEAN = (0.485, 0.456, 0.406)
_STD = (0.229, 0.224, 0.225)


@dataclass
class NetConfig:
    resolution: int = 64
    in_channels: int = 3
    encoder: str = "desk"  # "desk" or "vgg16"
    enc_widths: tuple = (32, 64, 128, 256)
    convs_per_stage: tuple = (2, 2, 2, 2)
    content_encoder: str = "desk"  # "desk" or "resnet18"
    content_widths: tuple = (32, 64, 128, 256)
    content_dim: int = 128
    mask_hidden: int = 128
    gate: str = "channel"  # "channel" or "scalar"
    lambda_init: float = 0.1
    unet_base: int = 32
    unet_depth: int = 3
    film_hidden: int = 128
    disc_widths: tuple = (32, 64, 128)
    disc_stride1: tuple = ()
    disc_kernel: int = 4
    disc_head_kernel: int = 3
    disc_head_padding: int = 0
    head_hidden: int = 64

    def __post_init__(self):
        for name in ("enc_widths", "convs_per_stage", "content_widths", "disc_widths", "disc_stride1"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.encoder not in ("desk", "vgg16"):
            raise ConfigurationError(f"unknown encoder {self.encoder!r}")
        if self.content_encoder not in ("desk", "resnet18"):
            raise ConfigurationError(f"unknown content encoder {self.content_encoder!r}")
        if self.gate not in ("channel", "scalar"):
            raise ConfigurationError(f"gate must be 'channel' or 'scalar', got {self.gate!r}")

    @property
    def feature_channels(self) -> int:
        return self.enc_widths[-1]

    @property
    def feature_size(self) -> int:
        return self.resolution // 2 ** len(self.enc_widths)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def desk_config(**overrides) -> NetConfig:
    return NetConfig(**overrides)


def paper_config(**overrides) -> NetConfig:
    cfg = dict(
        resolution=448,
        encoder="vgg16",
        enc_widths=(64, 128, 256, 512, 512),
        convs_per_stage=(2, 2, 3, 3, 3),
        content_encoder="resnet18",
        content_widths=(64, 128, 256, 512),
        content_dim=512,
        mask_hidden=512,
        unet_base=64,
        unet_depth=4,
        film_hidden=256,
        disc_widths=(64, 128, 256),
        disc_stride1=(512,),
        disc_head_kernel=4,
        disc_head_padding=1,
        head_hidden=256,
    )
    cfg.update(overrides)
    return NetConfig(**cfg)


def _normalize(x: Tensor) -> Tensor:
    mean = x.new_tensor(_MEAN).view(1, 3, 1, 1)
    std = x.new_tensor(_STD).view(1, 3, 1, 1)
    return (x - mean) / std


def check_images(x: Tensor, resolution: int, channels: int = 3, what: str = "input") -> None:
    if x.dim() != 4 or x.shape[1] != channels or tuple(x.shape[-2:]) != (resolution, resolution):
        raise ValidationError(
            f"{what} must have shape (B, {channels}, {resolution}, {resolution}), got {tuple(x.shape)}"
        )


def _groups(c: int) -> int:
    return math.gcd(8, c)


class DegradationEncoder(nn.Module):
    """VGG-style stack of conv stages, each ending in a 2x max-pool."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.encoder == "vgg16":
            from torchvision.models import vgg16

            self.features = vgg16(weights=None).features
            return
        layers, c_in = [], cfg.in_channels
        for width, n_conv in zip(cfg.enc_widths, cfg.convs_per_stage):
            for _ in range(n_conv):
                layers += [nn.Conv2d(c_in, width, 3, padding=1), nn.ReLU(inplace=True)]
                c_in = width
            layers.append(nn.MaxPool2d(2))
        self.features = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        check_images(x, self.cfg.resolution, self.cfg.in_channels)
        return self.features(_normalize(x))


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm1 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=stride) if (stride != 1 or c_in != c_out) else nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.skip(x))


class ContentEncoder(nn.Module):
    """Residual encoder of the reference image into a content vector ``z_c``."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.content_encoder == "resnet18":
            from torchvision.models import resnet18

            net = resnet18(weights=None)
            net.fc = nn.Linear(net.fc.in_features, cfg.content_dim)
            self.body = net
            self.proj = nn.Identity()
        else:
            w = cfg.content_widths
            blocks = [nn.Conv2d(cfg.in_channels, w[0], 3, padding=1), nn.ReLU(inplace=True)]
            c_in = w[0]
            for width in w:
                blocks.append(ResidualBlock(c_in, width, stride=2))
                c_in = width
            blocks += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
            self.body = nn.Sequential(*blocks)
            self.proj = nn.Linear(c_in, cfg.content_dim)

    def forward(self, x: Tensor) -> Tensor:
        check_images(x, self.cfg.resolution, self.cfg.in_channels)
        return self.proj(self.body(_normalize(x)))


def modulate(d: Tensor, mask_logits: Tensor, gate: Tensor, lam: Tensor) -> Tensor:
    """Residual content modulation ``D + lam * (sigmoid(gate) * tanh(mask_logits) * D)``.

    ``mask_logits`` is (B, C); ``gate`` is (C,) or (1,); both broadcast over space.
    """
    if d.dim() != 4:
        raise ValidationError(f"feature map must be 4-D, got shape {tuple(d.shape)}")
    c = d.shape[1]
    if mask_logits.shape[-1] != c or gate.numel() not in (1, c):
        raise ValidationError(
            f"channel mismatch: feature has {c} channels, mask {mask_logits.shape[-1]}, gate {gate.numel()}"
        )
    mask = torch.sigmoid(gate).view(1, -1) * torch.tanh(mask_logits)
    return d + lam * (mask.view(mask.shape[0], c, 1, 1) * d)


class CausalLayer(nn.Module):
    """Content-conditioned, channel-gated residual modulation of the degradation feature."""

    def __init__(self, content_dim: int, channels: int, hidden: int = 128, gate: str = "channel", lambda_init: float = 0.1):
        super().__init__()
        self.mask_net = nn.Sequential(
            nn.Linear(content_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels),
        )
        self.gate = nn.Parameter(torch.zeros(channels if gate == "channel" else 1))
        self.lam = nn.Parameter(torch.tensor(float(lambda_init)))

    @property
    def strength(self) -> Tensor:
        return self.lam.clamp(min=0.0)

    def clamp_(self) -> None:
        with torch.no_grad():
            self.lam.clamp_(min=0.0)

    def forward(self, d: Tensor, z_c: Tensor) -> Tensor:
        return modulate(d, self.mask_net(z_c), self.gate, self.strength)


def causal_modulate(d: Tensor, z_c: Tensor, layer: CausalLayer) -> Tensor:
    return layer(d, z_c)


def film(f: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Channel-wise ``(1 + gamma) * f + beta``; gamma/beta are (C,) or (B, C)."""
    c = f.shape[1]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise ValidationError(f"FiLM parameters must have length {c}, got {gamma.shape[-1]} and {beta.shape[-1]}")
    shape = (-1, c) + (1,) * (f.dim() - 2)
    return (1.0 + gamma.reshape(shape)) * f + beta.reshape(shape)


class FilmResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        h = film(self.norm(self.conv1(x)), gamma, beta)
        return x + self.conv2(F.silu(h))


class FilmUNet(nn.Module):
    """U-Net over the reference image, FiLM-conditioned on the pooled degradation feature.

    FiLM sites: one residual block per encoder scale, the bottleneck, and one
    per decoder scale. The output is ``sigmoid(logit(I_r) + residual)``, so a
    zero residual reproduces the reference.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        depth, base = cfg.unet_depth, cfg.unet_base
        widths = [base * 2**i for i in range(depth + 1)]
        self.stem = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList(FilmResBlock(widths[i]) for i in range(depth))
        self.downs = nn.ModuleList(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(depth))
        self.mid = FilmResBlock(widths[depth])
        self.ups = nn.ModuleList(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1) for i in range(depth))
        self.fuse = nn.ModuleList(nn.Conv2d(2 * widths[i], widths[i], 1) for i in range(depth))
        self.dec_blocks = nn.ModuleList(FilmResBlock(widths[i]) for i in range(depth))
        self.head = nn.Conv2d(widths[0], cfg.in_channels, 3, padding=1)

        self.site_channels = [widths[i] for i in range(depth)] + [widths[depth]] + [widths[i] for i in range(depth)]
        self.film_mlp = nn.Sequential(
            nn.Linear(cfg.feature_channels, cfg.film_hidden),
            nn.SiLU(),
            nn.Linear(cfg.film_hidden, 2 * sum(self.site_channels)),
        )
        # identity modulation and copy-the-reference output at initialisation
        nn.init.zeros_(self.film_mlp[-1].weight)
        nn.init.zeros_(self.film_mlp[-1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def film_params(self, d_mod: Tensor) -> list[tuple[Tensor, Tensor]]:
        pooled = d_mod.mean(dim=(2, 3))
        out = self.film_mlp(pooled)
        params, start = [], 0
        for c in self.site_channels:
            gamma = out[:, start : start + c]
            beta = out[:, start + c : start + 2 * c]
            params.append((gamma, beta))
            start += 2 * c
        return params

    def forward(self, ref: Tensor, d_mod: Tensor) -> Tensor:
        cfg = self.cfg
        if cfg.resolution % 2**cfg.unet_depth:
            raise ValidationError(f"resolution {cfg.resolution} is not divisible by 2^{cfg.unet_depth}")
        check_images(ref, cfg.resolution, cfg.in_channels, "reference")
        if d_mod.dim() != 4 or d_mod.shape[1] != cfg.feature_channels:
            raise ValidationError(
                f"degradation feature must be (B, {cfg.feature_channels}, h, w), got {tuple(d_mod.shape)}"
            )
        params = iter(self.film_params(d_mod))
        h = self.stem(ref * 2.0 - 1.0)
        skips = []
        for block, down in zip(self.enc_blocks, self.downs):
            h = block(h, *next(params))
            skips.append(h)
            h = F.silu(down(h))
        h = self.mid(h, *next(params))
        dec_params = [next(params) for _ in range(cfg.unet_depth)]
        for i in reversed(range(cfg.unet_depth)):
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = F.silu(self.ups[i](h))
            h = self.fuse[i](torch.cat([h, skips[i]], dim=1))
            h = self.dec_blocks[i](h, *dec_params[i])
        base = torch.logit(ref.clamp(1e-3, 1 - 1e-3))
        return torch.sigmoid(base + self.head(F.silu(h)))


class PatchDiscriminator(nn.Module):
    """Stride-2 conv stack followed by a conv head: one logit per receptive-field patch."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        layers, c_in = [], cfg.in_channels
        for i, w in enumerate(cfg.disc_widths):
            layers.append(nn.Conv2d(c_in, w, cfg.disc_kernel, stride=2, padding=1))
            if i > 0:
                layers.append(nn.GroupNorm(_groups(w), w))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            c_in = w
        for w in cfg.disc_stride1:
            layers += [
                nn.Conv2d(c_in, w, cfg.disc_kernel, stride=1, padding=1),
                nn.GroupNorm(_groups(w), w),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            c_in = w
        layers.append(nn.Conv2d(c_in, 1, cfg.disc_head_kernel, stride=1, padding=cfg.disc_head_padding))
        self.net = nn.Sequential(*layers)
        if self.grid_size() < 1:
            raise ValidationError(f"discriminator leaves no logits at resolution {cfg.resolution}")

    def grid_size(self) -> int:
        """Side length of the logit grid (receptive-field arithmetic)."""
        size = self.cfg.resolution
        for m in self.net:
            if isinstance(m, nn.Conv2d):
                size = (size + 2 * m.padding[0] - m.kernel_size[0]) // m.stride[0] + 1
        return size

    def forward(self, x: Tensor) -> Tensor:
        check_images(x, self.cfg.resolution, self.cfg.in_channels)
        return self.net(x * 2.0 - 1.0)


class RegressionHead(nn.Module):
    """Two fully connected layers from the pooled feature to one score.

    The input is layer-normalised (no affine). Targets are learned in
    standardised units; ``target_shift``/``target_scale`` map back to MOS units
    and default to the identity.
    """

    def __init__(self, in_dim: int, hidden: int = 64):
        super().__init__()
        self.in_dim = in_dim
        self.hidden = hidden
        self.norm = nn.LayerNorm(in_dim, elementwise_affine=False)
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        self.register_buffer("target_shift", torch.zeros(()))
        self.register_buffer("target_scale", torch.ones(()))

    def set_target_scale(self, shift, scale) -> None:
        self.target_shift.fill_(float(shift))
        self.target_scale.fill_(float(scale))

    def standardized(self, f: Tensor) -> Tensor:
        if f.dim() == 4:
            f = f.mean(dim=(2, 3))
        if f.shape[-1] != self.in_dim:
            raise ValidationError(f"head expects {self.in_dim} features, got {f.shape[-1]}")
        return self.fc2(F.relu(self.fc1(self.norm(f)))).squeeze(-1)

    def forward(self, f: Tensor) -> Tensor:
        return self.standardized(f) * self.target_scale + self.target_shift


def regress(d_mod: Tensor, head: RegressionHead) -> Tensor:
    return head(d_mod)


class CadisNet(nn.Module):
    """The full reconstruction model: encoders, causal layer, decoder and discriminator."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = DegradationEncoder(cfg)
        self.content_encoder = ContentEncoder(cfg)
        self.causal = CausalLayer(cfg.content_dim, cfg.feature_channels, cfg.mask_hidden, cfg.gate, cfg.lambda_init)
        self.decoder = FilmUNet(cfg)
        self.discriminator = PatchDiscriminator(cfg)

    def encode(self, dist: Tensor) -> Tensor:
        return self.encoder(dist)

    def content_encode(self, ref: Tensor) -> Tensor:
        return self.content_encoder(ref)

    def modulated(self, ref: Tensor, dist: Tensor, causal: bool = True) -> tuple[Tensor, Tensor]:
        d = self.encode(dist)
        if not causal:
            return d, d
        return d, self.causal(d, self.content_encode(ref))

    def decode(self, ref: Tensor, d_mod: Tensor) -> Tensor:
        return self.decoder(ref, d_mod)

    def discriminate(self, img: Tensor) -> Tensor:
        return self.discriminator(img)

    def forward(self, ref: Tensor, dist: Tensor, causal: bool = True) -> tuple[Tensor, Tensor, Tensor]:
        d, d_mod = self.modulated(ref, dist, causal)
        return self.decode(ref, d_mod), d, d_mod

    def generator_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("discriminator."):
                yield p


def to_batch(images, dtype=torch.float32) -> Tensor:
    """Stack (H, W, C) arrays in [0, 1] into a (B, C, H, W) tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if arr.ndim == 3:
        arr = arr[..., None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype).contiguous()


def dag_acyclicity_penalty(a, c: float = 1.0, s: float = 1.0):
    """``tr((I + (c/s) A∘A)^n) - n``; zero exactly when the support of ``A`` is acyclic.

    Works on numpy arrays (returns float) and torch tensors (differentiable).
    """
    if c <= 0 or s <= 0:
        raise ValidationError("c and s must be positive")
    if isinstance(a, Tensor):
        if a.dim() != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise ValidationError(f"adjacency matrix must be square, got shape {tuple(a.shape)}")
        n = a.shape[0]
        m = torch.eye(n, dtype=a.dtype, device=a.device) + (c / s) * a * a
        return torch.trace(torch.linalg.matrix_power(m, n)) - n
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValidationError(f"adjacency matrix must be square, got shape {a.shape}")
    n = a.shape[0]
    m = np.eye(n) + (c / s) * a * a
    return float(np.trace(np.linalg.matrix_power(m, n)) - n)
