"""Pre-training, label-free fine-tuning and regression-head training."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import subprocess
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import TrainConfig
from .degrade import Manifest
from .errors import InputError, TrainingError, ValidationError
from .imageio import load_image
from .losses import FeatureExtractor, loss_adversarial, total_loss
from .networks import CadisNet, NetConfig, RegressionHead, desk_config

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_mse", "L_vgg", "L_gan_g", "L_gan_d", "total")


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    t = min(max(step, 0), total_steps) / max(total_steps, 1)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t))


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


@dataclass
class Checkpoint:
    """Everything needed to resume or score: network, configs, epoch and RNG state."""

    net: CadisNet
    net_cfg: NetConfig
    train_cfg: TrainConfig
    epoch: int = 0
    seed: int = 0
    rng_state: torch.Tensor | None = None
    history: list = field(default_factory=list)
    phase: str = "init"

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        state = {"net": self.net.state_dict(), "rng": self.rng_state}
        torch.save(state, directory / "weights.bin")
        (directory / "config.json").write_text(
            json.dumps({"net": self.net_cfg.to_dict(), "train": self.train_cfg.to_dict()}, indent=2, sort_keys=True)
        )
        meta = {"epoch": self.epoch, "seed": self.seed, "git_describe": git_describe(), "phase": self.phase}
        (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        if not (directory / "weights.bin").is_file():
            raise InputError(f"{directory} is not a checkpoint directory")
        cfg = json.loads((directory / "config.json").read_text())
        meta = json.loads((directory / "meta.json").read_text())
        net_cfg = NetConfig.from_dict(cfg["net"])
        train_cfg = TrainConfig.from_dict(cfg["train"])
        net = CadisNet(net_cfg)
        state = torch.load(directory / "weights.bin", map_location="cpu", weights_only=True)
        if train_cfg.precision == "float64":
            net = net.double()
        net.load_state_dict(state["net"])
        net.eval()
        return cls(net, net_cfg, train_cfg, meta["epoch"], meta["seed"], state.get("rng"), [], meta.get("phase", ""))


def save_head(head: RegressionHead, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(head.state_dict(), directory / "head.bin")
    (directory / "head.json").write_text(json.dumps({"in_dim": head.in_dim, "hidden": head.hidden}, sort_keys=True))
    return directory


def load_head(directory) -> RegressionHead:
    directory = Path(directory)
    spec = json.loads((directory / "head.json").read_text())
    head = RegressionHead(spec["in_dim"], spec["hidden"])
    head.load_state_dict(torch.load(directory / "head.bin", map_location="cpu", weights_only=True))
    head.eval()
    return head


def write_log(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])


@lru_cache(maxsize=8192)
def _read(path: str, size: int) -> np.ndarray:
    img = load_image(path, size)
    img.setflags(write=False)
    return img


class PairLoader:
    """Yields (reference, distorted) batches; shuffling and flips come from one seeded generator."""

    def __init__(self, manifest: Manifest, resize: int, batch_size: int, dtype=torch.float32):
        if len(manifest) == 0:
            raise InputError("no records to train on")
        self.manifest = manifest
        self.resize = resize
        self.batch_size = batch_size
        self.dtype = dtype

    def __len__(self):
        return math.ceil(len(self.manifest) / self.batch_size)

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor]:
        recs = [self.manifest.records[i] for i in idx]
        ref = np.stack([_read(str(self.manifest.resolve(r.ref_path)), self.resize) for r in recs])
        dist = np.stack([_read(str(self.manifest.resolve(r.dist_path)), self.resize) for r in recs])
        to_t = lambda a: torch.from_numpy(a).permute(0, 3, 1, 2).to(self.dtype).contiguous()  # noqa: E731
        return to_t(ref), to_t(dist)

    def epoch(self, gen: torch.Generator | None, flip_prob: float = 0.0):
        n = len(self.manifest)
        order = torch.randperm(n, generator=gen).tolist() if gen is not None else list(range(n))
        for start in range(0, n, self.batch_size):
            idx = order[start : start + self.batch_size]
            ref, dist = self.batch(idx)
            if gen is not None and flip_prob > 0:
                flip = torch.rand(len(idx), generator=gen) < flip_prob
                ref[flip] = ref[flip].flip(-1)
                dist[flip] = dist[flip].flip(-1)
            yield ref, dist


def _dtype(cfg: TrainConfig):
    return torch.float64 if cfg.precision == "float64" else torch.float32


def build_net(net_cfg: NetConfig, cfg: TrainConfig) -> CadisNet:
    cfg.check_resolution(net_cfg.unet_depth)
    if net_cfg.resolution != cfg.resize:
        raise ValidationError(f"network resolution {net_cfg.resolution} differs from resize {cfg.resize}")
    set_deterministic(cfg.seed)
    net = CadisNet(net_cfg)
    return net.double() if cfg.precision == "float64" else net


def make_feature_net(cfg: TrainConfig, kind: str = "desk", weights_path=None) -> FeatureExtractor | None:
    if cfg.loss_weights.w_perc == 0:
        return None
    net = FeatureExtractor(kind, weights_path)
    return net.double() if cfg.precision == "float64" else net


@torch.no_grad()
def evaluate_loss(ckpt: Checkpoint, manifest: Manifest, cfg: TrainConfig | None = None, feat_net=None) -> dict:
    """Mean reconstruction loss over ``manifest`` with no augmentation (record-weighted)."""
    cfg = cfg or ckpt.train_cfg
    net = ckpt.net
    net.eval()
    if feat_net is None:
        feat_net = make_feature_net(cfg)
    loader = PairLoader(manifest, cfg.resize, cfg.batch_size, _dtype(cfg))
    sums = dict.fromkeys(LOG_COLUMNS[1:], 0.0)
    n = 0
    for ref, dist in loader.epoch(None):
        recon, _, _ = net(ref, dist, cfg.causal_layer_enabled)
        fake = net.discriminate(recon) if cfg.loss_weights.w_adv > 0 else None
        _, parts = total_loss(recon, dist, fake, cfg.loss_weights, feat_net, cfg.saturating)
        if fake is not None:
            parts["L_gan_d"] = float(loss_adversarial(net.discriminate(dist), fake)[1])
        else:
            parts["L_gan_d"] = 0.0
        b = ref.shape[0]
        for k in sums:
            sums[k] += parts[k] * b
        n += b
    return {k: v / n for k, v in sums.items()}


def _fit(ckpt: Checkpoint, manifest: Manifest, cfg: TrainConfig, out_dir=None, feat_net=None) -> Checkpoint:
    net = ckpt.net
    dtype = _dtype(cfg)
    loader = PairLoader(manifest, cfg.resize, cfg.batch_size, dtype)
    if feat_net is None:
        feat_net = make_feature_net(cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)

    skip = ("discriminator.",) + (() if cfg.causal_layer_enabled else ("causal.", "content_encoder."))
    g_params = [p for n_, p in net.named_parameters() if not n_.startswith(skip)]
    d_params = list(net.discriminator.parameters())
    use_gan = cfg.loss_weights.w_adv > 0
    total_steps = cfg.epochs * len(loader)
    sched = lambda step: cosine_lr(step, total_steps, 1.0)  # noqa: E731
    opt_g = torch.optim.AdamW(g_params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    sch_g = torch.optim.lr_scheduler.LambdaLR(opt_g, sched)
    if use_gan:
        opt_d = torch.optim.AdamW(d_params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
        sch_d = torch.optim.lr_scheduler.LambdaLR(opt_d, sched)

    history = list(ckpt.history)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        for ref, dist in loader.epoch(gen, cfg.flip_prob):
            recon, _, _ = net(ref, dist, cfg.causal_layer_enabled)
            l_d = 0.0
            if use_gan:
                d_loss = loss_adversarial(net.discriminate(dist), net.discriminate(recon.detach()))[1]
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()
                sch_d.step()
                l_d = d_loss.item()
            fake = net.discriminate(recon) if use_gan else None
            loss, parts = total_loss(recon, dist, fake, cfg.loss_weights, feat_net, cfg.saturating)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}: {parts}")
            opt_g.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(g_params, cfg.grad_clip)
            opt_g.step()
            sch_g.step()
            net.causal.clamp_()
            step += 1
            history.append({"step": step, **parts, "L_gan_d": l_d})
        log.info("%s epoch %d/%d loss %.6f", cfg.phase, epoch, cfg.epochs, history[-1]["total"])
        ckpt = replace(ckpt, epoch=ckpt.epoch + 1, rng_state=gen.get_state(), history=history, phase=cfg.phase, train_cfg=cfg)
        if out_dir is not None and cfg.save_every and epoch % cfg.save_every == 0:
            ckpt.save(Path(out_dir) / f"epoch_{ckpt.epoch:03d}")
    net.eval()
    if out_dir is not None:
        ckpt.save(Path(out_dir) / "final")
        write_log(history, Path(out_dir) / "train_log.csv")
    return ckpt


def init_checkpoint(cfg: TrainConfig, net_cfg: NetConfig | None = None) -> Checkpoint:
    """A seeded, untrained checkpoint (the starting point when pretraining is skipped)."""
    net_cfg = net_cfg or desk_config(resolution=cfg.resize)
    return Checkpoint(build_net(net_cfg, cfg), net_cfg, cfg, 0, cfg.seed, None, [], "init")


def pretrain(manifest: Manifest, cfg: TrainConfig, net_cfg: NetConfig | None = None, out_dir=None, feat_net=None) -> Checkpoint:
    """Train the reconstruction model from scratch on the ``pretrain`` split."""
    if cfg.phase != "pretrain":
        raise ValidationError(f"pretrain needs phase='pretrain', got {cfg.phase!r}")
    data = manifest.subset("pretrain")
    if len(data) == 0:
        raise InputError("manifest has no pretrain records")
    return _fit(init_checkpoint(cfg, net_cfg), data, cfg, out_dir, feat_net)


def finetune(ckpt: Checkpoint, manifest: Manifest, cfg: TrainConfig, out_dir=None, feat_net=None) -> Checkpoint:
    """Continue the reconstruction objective on the ``finetune`` split. MOS is never read.

    The first history row (step 0) is the evaluation loss of ``ckpt`` on that
    split before any update; the cosine schedule restarts.
    """
    if cfg.phase != "finetune":
        raise ValidationError(f"finetune needs phase='finetune', got {cfg.phase!r}")
    data = manifest.subset("finetune")
    if len(data) == 0 or not data.pristine():
        raise InputError("manifest has no finetune records")
    net = copy.deepcopy(ckpt.net)
    if cfg.precision == "float64":
        net = net.double()
    start = replace(ckpt, net=net, history=[])
    if feat_net is None:
        feat_net = make_feature_net(cfg)
    before = evaluate_loss(start, data, cfg, feat_net)
    start.history = [{"step": 0, **before}]
    return _fit(start, data, cfg, out_dir, feat_net)


@torch.no_grad()
def pooled_features(net: CadisNet, loader: PairLoader, raw: bool = False, causal: bool = True) -> torch.Tensor:
    net.eval()
    out = []
    for ref, dist in loader.epoch(None):
        d, d_mod = net.modulated(ref, dist, causal)
        out.append((d if raw else d_mod).mean(dim=(2, 3)))
    return torch.cat(out)


def train_regression_head(
    ckpt: Checkpoint,
    labeled: Manifest,
    frozen: bool = True,
    cfg: TrainConfig | None = None,
    hidden: int | None = None,
) -> tuple[RegressionHead, CadisNet]:
    """Fit the two-layer head to MOS; with ``frozen=False`` the feature path trains too.

    Returns the head and the (possibly updated, always copied) network.
    """
    labeled = labeled.labeled()
    if len(labeled) == 0:
        raise InputError("no records with a MOS label")
    cfg = cfg or TrainConfig(phase="head", epochs=300, lr=1e-3, flip_prob=0.0, resize=ckpt.train_cfg.resize)
    dtype = _dtype(cfg)
    net = copy.deepcopy(ckpt.net).to(dtype)
    set_deterministic(cfg.seed)
    head = RegressionHead(net.cfg.feature_channels, hidden or net.cfg.head_hidden).to(dtype)
    mos = torch.tensor([r.mos for r in labeled.records], dtype=dtype)
    mu = mos.mean()
    sd = mos.std() if len(mos) > 1 and mos.std() > 0 else torch.ones((), dtype=dtype)
    head.set_target_scale(mu, sd)
    loader = PairLoader(labeled, cfg.resize, cfg.batch_size, dtype)
    gen = torch.Generator().manual_seed(cfg.seed)
    causal = ckpt.train_cfg.causal_layer_enabled

    if frozen:
        for p in net.parameters():
            p.requires_grad_(False)
        feats = pooled_features(net, loader, causal=causal)
        params = list(head.parameters())
    else:
        params = list(head.parameters()) + [
            p for n_, p in net.named_parameters() if n_.startswith(("encoder.", "content_encoder.", "causal."))
        ]
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    n = len(labeled)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    sch = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: cosine_lr(s, cfg.epochs * steps_per_epoch, 1.0))
    head.train()
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if frozen:
                f = feats[idx]
            else:
                net.train()
                ref, dist = loader.batch(idx.tolist())
                f = net.modulated(ref, dist, causal)[1].mean(dim=(2, 3))
            pred = head.standardized(f)
            loss = ((pred - (mos[idx] - mu) / sd) ** 2).mean()
            if not torch.isfinite(loss):
                raise TrainingError("non-finite regression loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sch.step()
            if not frozen:
                net.causal.clamp_()
    head.eval()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(True)
    return head, net
