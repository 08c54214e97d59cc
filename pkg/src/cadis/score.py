"""Quality prediction from pooled modulated features.

Zero-shot: the pooled features of an evaluation set are embedded jointly into
one dimension and the sign is fixed with high-quality anchors. The coordinate
is only a relative quality (identified up to a monotone transform), so PLCC
needs ``logistic_map`` while SRCC uses it as is.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import OptimizeWarning, curve_fit

from .degrade import Manifest
from .embedding import embed
from .errors import FittingError, InputError, ValidationError
from .networks import RegressionHead, check_images, regress

SCORE_COLUMNS = ("ref_path", "dist_path", "kind", "level", "y", "m_hat", "mos")


@dataclass(frozen=True)
class EmbeddingParams:
    n_neighbors: int = 15
    min_dist: float = 0.1
    seed: int = 0
    normalize: bool = False  # L2-normalise features before embedding

    def __post_init__(self):
        if self.n_neighbors < 2:
            raise ValidationError("n_neighbors must be >= 2")
        if not 0.0 <= self.min_dist < 1.0:
            raise ValidationError("min_dist must lie in [0, 1)")


@dataclass
class QualityEstimate:
    y: float
    m_hat: float | None = None
    orientation: str = "as_is"

    def __post_init__(self):
        if not np.isfinite(self.y):
            raise ValidationError("y must be finite")
        if self.orientation not in ("as_is", "flipped"):
            raise ValidationError(f"bad orientation {self.orientation!r}")


@dataclass
class ManifoldProbe:
    """Samples near a piecewise-linear curve with known position ``q``.

    ``control_points`` is (k, p); ``q`` in [0, 1] is spread evenly over the
    k - 1 segments, and isotropic Gaussian noise of std ``eta`` is added.
    """

    control_points: np.ndarray
    eta: float = 0.0
    n_samples: int = 200
    seed: int = 0

    def __post_init__(self):
        self.control_points = np.atleast_2d(np.asarray(self.control_points, dtype=float))
        if len(self.control_points) < 2:
            raise ValidationError("a probe curve needs at least two control points")
        if np.any(self.segment_lengths() <= 0):
            raise ValidationError("consecutive control points must differ")
        if self.eta < 0:
            raise ValidationError("eta must be non-negative")

    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.control_points, axis=0), axis=1)

    def curve(self, q) -> np.ndarray:
        q = np.clip(np.asarray(q, dtype=float), 0.0, 1.0)
        k = len(self.control_points) - 1
        t = q * k
        i = np.minimum(t.astype(int), k - 1)
        frac = (t - i)[:, None]
        c = self.control_points
        return c[i] + (c[i + 1] - c[i]) * frac

    def sample(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x, q)`` with x of shape (n_samples, p)."""
        rng = np.random.default_rng(self.seed)
        q = rng.uniform(size=self.n_samples)
        x = self.curve(q)
        if self.eta > 0:
            x = x + rng.normal(size=x.shape) * self.eta
        return x, q

    @classmethod
    def linear(cls, p: int = 16, n_samples: int = 200, eta: float = 0.0, seed: int = 0) -> "ManifoldProbe":
        v = np.random.default_rng(seed).normal(size=p)
        return cls(np.stack([np.zeros(p), v]), eta, n_samples, seed)

    @classmethod
    def curved(
        cls, p: int = 16, segments: int = 3, n_samples: int = 300, eta_frac: float = 0.01, seed: int = 0
    ) -> "ManifoldProbe":
        """Random polyline; noise std is ``eta_frac`` times the shortest segment."""
        ctrl = np.random.default_rng(seed).normal(size=(segments + 1, p))
        probe = cls(ctrl, 0.0, n_samples, seed)
        probe.eta = eta_frac * float(probe.segment_lengths().min())
        return probe


# --- features ----------------------------------------------------------------------------------


@torch.no_grad()
def extract_feature(ckpt, refs, dists, raw: bool = False, batch_size: int = 32) -> np.ndarray:
    """Global-average-pooled modulated feature (or raw D) for each (reference, distorted) pair.

    ``refs``/``dists`` are (B, C, H, W) tensors or sequences of (H, W, C) arrays.
    """
    from .networks import to_batch

    net = ckpt.net if hasattr(ckpt, "net") else ckpt
    dtype = next(net.parameters()).dtype
    ref = refs if torch.is_tensor(refs) else to_batch(refs, dtype)
    dist = dists if torch.is_tensor(dists) else to_batch(dists, dtype)
    check_images(ref, net.cfg.resolution, what="reference")
    check_images(dist, net.cfg.resolution, what="distorted image")
    if ref.shape != dist.shape:
        raise ValidationError(f"reference/distorted shape mismatch: {tuple(ref.shape)} vs {tuple(dist.shape)}")
    causal = getattr(getattr(ckpt, "train_cfg", None), "causal_layer_enabled", True)
    net.eval()
    out = []
    for s in range(0, len(ref), batch_size):
        d, d_mod = net.modulated(ref[s : s + batch_size].to(dtype), dist[s : s + batch_size].to(dtype), causal)
        out.append((d if raw else d_mod).mean(dim=(2, 3)))
    return torch.cat(out).double().numpy()


def manifest_features(ckpt, manifest: Manifest, raw: bool = False, cache_dir=None) -> np.ndarray:
    """Pooled features for every record, optionally cached as ``.npy`` keyed by content hash."""
    import hashlib

    from .train import PairLoader

    key = None
    if cache_dir is not None:
        h = hashlib.sha256()
        for name, t in sorted(ckpt.net.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        for r in manifest.records:
            h.update(f"{manifest.resolve(r.ref_path)}|{manifest.resolve(r.dist_path)}".encode())
        h.update(b"raw" if raw else b"mod")
        key = Path(cache_dir) / f"feat_{h.hexdigest()[:24]}.npy"
        if key.exists():
            return np.load(key)
    dtype = next(ckpt.net.parameters()).dtype
    loader = PairLoader(manifest, ckpt.net.cfg.resolution, 32, dtype)
    feats = [extract_feature(ckpt, ref, dist, raw) for ref, dist in loader.epoch(None)]
    out = np.concatenate(feats)
    if key is not None:
        key.parent.mkdir(parents=True, exist_ok=True)
        np.save(key, out)
    return out


# --- zero-shot -----------------------------------------------------------------------------------


def embed_1d(features, params: EmbeddingParams | None = None) -> np.ndarray:
    params = params or EmbeddingParams()
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise ValidationError("features must be a 2-D (samples x dims) array")
    if len(x) < params.n_neighbors + 1:
        raise InputError(f"need at least {params.n_neighbors + 1} samples to embed, got {len(x)}")
    if not np.isfinite(x).all():
        raise ValidationError("features must be finite")
    if params.normalize:
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    return embed(x, n_neighbors=params.n_neighbors, min_dist=params.min_dist, seed=params.seed)


def orient(y, anchor_idx) -> tuple[np.ndarray, str]:
    """Flip ``y`` if needed so the anchors (known best quality) sit above the global mean."""
    y = np.asarray(y, dtype=float)
    anchor_idx = np.asarray(anchor_idx, dtype=int)
    if anchor_idx.size == 0:
        raise InputError("orientation needs at least one anchor")
    if y[anchor_idx].mean() >= y.mean():
        return y.copy(), "as_is"
    return -y, "flipped"


def default_anchors(levels, kinds=None) -> np.ndarray:
    """Indices of the lowest level present (per kind if given)."""
    levels = np.asarray(levels)
    if kinds is None:
        return np.flatnonzero(levels == levels.min())
    kinds = np.asarray(kinds)
    idx = [np.flatnonzero((kinds == k) & (levels == levels[kinds == k].min())) for k in np.unique(kinds)]
    return np.sort(np.concatenate(idx))


def zero_shot(features, levels, kinds=None, params: EmbeddingParams | None = None, group_by_kind: bool = False):
    """Embed, then orient. Returns ``(y, orientations)``; one orientation per group."""
    params = params or EmbeddingParams()
    features = np.asarray(features, dtype=float)
    levels = np.asarray(levels)
    y = np.empty(len(features))
    orientations = {}
    if group_by_kind:
        if kinds is None:
            raise InputError("grouping by kind needs the kind of every sample")
        kinds = np.asarray(kinds)
        groups = {k: np.flatnonzero(kinds == k) for k in np.unique(kinds)}
    else:
        groups = {"all": np.arange(len(features))}
    for name, idx in groups.items():
        raw = embed_1d(features[idx], params)
        sub_kinds = None if kinds is None or group_by_kind else np.asarray(kinds)[idx]
        y[idx], orientations[str(name)] = orient(raw, default_anchors(levels[idx], sub_kinds))
    return y, orientations


def _logistic4(x, b1, b2, b3, b4):
    z = np.clip(-(x - b3) / np.abs(b4), -500, 500)
    return b1 + (b2 - b1) / (1.0 + np.exp(z))


def logistic_map(y, mos) -> np.ndarray:
    """Least-squares four-parameter logistic from ``y`` to ``mos``; returns the mapped scores."""
    y = np.asarray(y, dtype=float)
    mos = np.asarray(mos, dtype=float)
    if y.shape != mos.shape:
        raise ValidationError("y and mos must have equal length")
    if len(y) < 5:
        raise InputError("logistic mapping needs at least 5 samples")
    if not (np.isfinite(y).all() and np.isfinite(mos).all()):
        raise ValidationError("y and mos must be finite")
    if np.ptp(y) == 0:
        raise FittingError("cannot fit a logistic to constant scores")
    if np.ptp(mos) == 0:
        raise FittingError("cannot fit a logistic to constant MOS")
    # start near the affine map: a wide logistic is almost linear over the data range
    slope = np.polyfit(y, mos, 1)[0]
    width = 4.0 * np.ptp(y)
    span = slope * 4.0 * width if slope != 0 else np.ptp(mos)
    starts = [
        (np.mean(mos) - span / 2, np.mean(mos) + span / 2, np.mean(y), width),
        (mos.min(), mos.max(), np.median(y), np.std(y) or 1.0),
        (mos.max(), mos.min(), np.median(y), np.std(y) or 1.0),
    ]
    best, best_sse = None, np.inf
    for p0 in starts:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OptimizeWarning)
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                params, _ = curve_fit(_logistic4, y, mos, p0=p0, maxfev=20000)
            except RuntimeError:
                continue
        sse = np.sum((_logistic4(y, *params) - mos) ** 2)
        if np.isfinite(sse) and sse < best_sse:
            best, best_sse = params, sse
    # the affine map is the wide-logistic limit of the family; keep it when it fits better
    lin = np.polyval(np.polyfit(y, mos, 1), y)
    if np.sum((lin - mos) ** 2) <= best_sse:
        return lin
    return _logistic4(y, *best)


# --- supervised ------------------------------------------------------------------------------------


def predict_supervised(head: RegressionHead, f) -> np.ndarray:
    """Head prediction for pooled features ``f`` (n, p) or a single vector (p,)."""
    t = torch.as_tensor(np.asarray(f), dtype=next(head.parameters()).dtype)
    single = t.ndim == 1
    with torch.no_grad():
        head.eval()
        out = regress(t[None] if single else t, head).double().numpy()
    return out[0] if single else out


# --- output ------------------------------------------------------------------------------------------


@dataclass
class ScoreTable:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCORE_COLUMNS)
            for r in self.rows:
                w.writerow([_cell(r.get(c)) for c in SCORE_COLUMNS])
        path.with_suffix(".json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "ScoreTable":
        path = Path(path)
        if not path.exists():
            raise InputError(f"no such scores file: {path}")
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in SCORE_COLUMNS if c not in (reader.fieldnames or [])]
            rows = list(reader)
        if missing:
            raise InputError(f"scores file {path} is missing column(s): {', '.join(missing)}")
        for r in rows:
            r["level"] = int(r["level"])
            for c in ("y", "m_hat", "mos"):
                r[c] = float(r[c]) if r[c] != "" else None
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        return cls(rows, meta)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def score_manifest(
    ckpt,
    manifest: Manifest,
    mode: str = "zeroshot",
    params: EmbeddingParams | None = None,
    head: RegressionHead | None = None,
    group_by_kind: bool = True,
    cache_dir=None,
) -> ScoreTable:
    """Score every record of ``manifest``; zero-shot fills ``y`` only, supervised fills ``m_hat`` too."""
    params = params or EmbeddingParams()
    if len(manifest) == 0:
        raise InputError("nothing to score")
    feats = manifest_features(ckpt, manifest, cache_dir=cache_dir)
    recs = manifest.records
    levels = np.array([r.level for r in recs])
    kinds = np.array([r.kind for r in recs])
    meta = {"mode": mode, "embedding": asdict(params), "group_by_kind": group_by_kind, "n": len(recs)}
    if mode == "zeroshot":
        y, orient_ = zero_shot(feats, levels, kinds, params, group_by_kind)
        meta["orientation"] = orient_
        m_hat = [None] * len(recs)
    elif mode == "supervised":
        if head is None:
            raise InputError("supervised scoring needs a trained regression head")
        pred = predict_supervised(head, feats)
        y, m_hat = pred, [float(v) for v in pred]
    else:
        raise ValidationError(f"mode must be 'zeroshot' or 'supervised', got {mode!r}")
    rows = [
        {
            "ref_path": r.ref_path,
            "dist_path": r.dist_path,
            "kind": r.kind,
            "level": r.level,
            "y": float(y[i]),
            "m_hat": m_hat[i],
            "mos": r.mos,
        }
        for i, r in enumerate(recs)
    ]
    return ScoreTable(rows, meta)
