"""Correlation metrics, controlled-validation statistics and classical FR-IQA baselines."""

from __future__ import annotations

import csv
import json
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, stats

from .errors import ValidationError

LUMA = np.array([0.299, 0.587, 0.114])  # ITU-R BT.601


class DegenerateWarning(RuntimeWarning):
    """A correlation was requested on a constant vector; the result is NaN."""


def _pair(a, b, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < min_len:
        raise ValidationError(f"need at least {min_len} values, got {a.size}")
    return a, b


def srcc(a, b) -> float:
    """Spearman rank correlation (average ranks for ties). NaN, with a warning, on constant input."""
    a, b = _pair(a, b, 2)
    ra, rb = stats.rankdata(a), stats.rankdata(b)
    if np.ptp(ra) == 0 or np.ptp(rb) == 0:
        warnings.warn("SRCC undefined for a constant vector", DegenerateWarning, stacklevel=2)
        return float("nan")
    return float(np.corrcoef(ra, rb)[0, 1])


def plcc(a, b) -> float:
    a, b = _pair(a, b, 2)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValidationError("PLCC undefined for a zero-variance vector")
    ac, bc = a - a.mean(), b - b.mean()
    return float(np.dot(ac, bc) / np.sqrt(np.dot(ac, ac) * np.dot(bc, bc)))


def rmse(a, b) -> float:
    a, b = _pair(a, b, 1)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _plcc_or_nan(a, b) -> float:
    try:
        return plcc(a, b)
    except ValidationError:
        return float("nan")


def pairwise_accuracy(scores, mos) -> float:
    """Fraction of MOS-ordered pairs the scores order the same way; score ties count 1/2.

    Pairs tied in MOS are excluded. NaN when every pair is tied in MOS.
    """
    s, m = _pair(scores, mos, 2)
    i, j = np.triu_indices(s.size, k=1)
    dm = np.sign(m[i] - m[j])
    ds = np.sign(s[i] - s[j])
    keep = dm != 0
    if not keep.any():
        return float("nan")
    agree = np.where(ds[keep] == 0, 0.5, (ds[keep] == dm[keep]).astype(float))
    return float(agree.mean())


def fixed_level_ranking(scores, mos, kinds, levels, ref_ids=None) -> dict:
    """Per (kind, level) group: SRCC, PLCC and pairwise accuracy across contents.

    Groups with fewer than two distinct references are skipped and listed.
    """
    scores = np.asarray(scores, dtype=float)
    mos = np.asarray(mos, dtype=float)
    kinds = np.asarray(kinds)
    levels = np.asarray(levels)
    ref_ids = np.asarray(ref_ids) if ref_ids is not None else np.arange(scores.size)
    per_level, skipped = [], []
    for kind in sorted(set(kinds.tolist())):
        for level in sorted(set(levels[kinds == kind].tolist())):
            sel = (kinds == kind) & (levels == level)
            if len(set(ref_ids[sel].tolist())) < 2:
                skipped.append({"kind": kind, "level": int(level), "n": int(sel.sum())})
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateWarning)
                per_level.append(
                    {
                        "kind": kind,
                        "level": int(level),
                        "n": int(sel.sum()),
                        "srcc": srcc(scores[sel], mos[sel]),
                        "plcc": _plcc_or_nan(scores[sel], mos[sel]),
                        "pairwise_acc": pairwise_accuracy(scores[sel], mos[sel]),
                    }
                )
    if skipped:
        warnings.warn(f"fixed-level ranking skipped {len(skipped)} small groups", RuntimeWarning, stacklevel=2)

    def mean_of(key):
        vals = [g[key] for g in per_level if np.isfinite(g[key])]
        return float(np.mean(vals)) if vals else float("nan")

    return {
        "per_level": per_level,
        "mean_srcc": mean_of("srcc"),
        "mean_plcc": mean_of("plcc"),
        "mean_pairwise_acc": mean_of("pairwise_acc"),
        "skipped": skipped,
    }


def ls_slope(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def sensitivity_alignment(scores, mos, levels, ref_ids, kinds=None, min_levels: int = 3) -> dict:
    """Correlate per-reference score-vs-level slopes with MOS-vs-level slopes.

    With ``kinds`` given, slopes are fitted per (kind, reference) and the
    statistics are averaged over kinds. Undefined correlations come back NaN.
    """
    scores = np.asarray(scores, dtype=float)
    mos = np.asarray(mos, dtype=float)
    levels = np.asarray(levels, dtype=float)
    ref_ids = np.asarray(ref_ids)
    kinds = np.asarray(kinds) if kinds is not None else np.full(scores.size, "all")
    results, skipped = [], []
    for kind in sorted(set(kinds.tolist())):
        ks = kinds == kind
        s_slopes, m_slopes = [], []
        for ref in sorted(set(ref_ids[ks].tolist())):
            sel = ks & (ref_ids == ref)
            if len(set(levels[sel].tolist())) < min_levels:
                skipped.append({"kind": kind, "ref": str(ref)})
                continue
            s_slopes.append(ls_slope(levels[sel], scores[sel]))
            m_slopes.append(ls_slope(levels[sel], mos[sel]))
        lv = sorted(set(levels[ks].tolist()))
        curve_s = [scores[ks & (levels == v)].mean() for v in lv]
        curve_m = [mos[ks & (levels == v)].mean() for v in lv]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateWarning)
            if len(s_slopes) >= 2:
                results.append(
                    {
                        "kind": kind,
                        "slope_srcc": srcc(s_slopes, m_slopes),
                        "slope_plcc": _plcc_or_nan(s_slopes, m_slopes),
                        "mean_curve_srcc": srcc(curve_s, curve_m) if len(lv) >= 2 else float("nan"),
                    }
                )
    out = {"per_kind": results, "skipped": skipped}
    for key in ("slope_srcc", "slope_plcc", "mean_curve_srcc"):
        vals = [r[key] for r in results]
        out[key] = float(np.mean(vals)) if vals and all(np.isfinite(vals)) else float("nan")
    if not np.isfinite(out["slope_srcc"]):
        warnings.warn("sensitivity slope correlation is undefined", DegenerateWarning, stacklevel=2)
    return out


def binomial_ci(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Exact (Clopper-Pearson) interval for a binomial proportion."""
    ci = stats.binomtest(int(successes), int(n)).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


# --- classical full-reference baselines -----------------------------------------------------


def _luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[2] == 1:
        return img[:, :, 0]
    if img.ndim == 2:
        return img
    raise ValidationError(f"expected an (H, W[, C]) image, got shape {img.shape}")


def _two_images(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return _luma(a), _luma(b)


def psnr(a, b, data_range: float = 1.0, cap: float = 100.0) -> float:
    """PSNR in dB on BT.601 luma, capped at ``cap`` for identical images."""
    x, y = _two_images(a, b)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return cap
    return float(min(cap, 10.0 * np.log10(data_range**2 / mse)))


def ssim(a, b, data_range: float = 1.0, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11-tap Gaussian window (sigma 1.5) on luma, valid region only."""
    x, y = _two_images(a, b)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    blur = lambda z: ndimage.gaussian_filter(z, sigma, truncate=3.5)  # noqa: E731
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    pad = int(3.5 * sigma + 0.5)
    smap = (num / den)[pad:-pad, pad:-pad] if min(x.shape) > 2 * pad else num / den
    return float(smap.mean())


def gmsd(a, b, c: float = 170.0 / 255.0**2) -> float:
    """Gradient magnitude similarity deviation (Prewitt, 2x average-downsampled luma)."""
    x, y = _two_images(a, b)
    avg = np.ones((2, 2)) / 4.0
    x = ndimage.convolve(x, avg, mode="nearest")[::2, ::2]
    y = ndimage.convolve(y, avg, mode="nearest")[::2, ::2]
    hx = np.array([[1, 0, -1], [1, 0, -1], [1, 0, -1]]) / 3.0
    hy = hx.T

    def grad_mag(z):
        return np.sqrt(ndimage.correlate(z, hx, mode="nearest") ** 2 + ndimage.correlate(z, hy, mode="nearest") ** 2)

    gx, gy = grad_mag(x), grad_mag(y)
    gms = (2 * gx * gy + c) / (gx**2 + gy**2 + c)
    return float(gms.std())


# --- counterfactual transfer -----------------------------------------------------------------


def counterfactual_transfer(net, src_pair, target_ref, same_kind_truth, other_kind_truth, use_modulated: bool = False) -> bool:
    """Decode the source degradation feature onto another reference and check which truth it resembles.

    Uses the feature before the causal layer unless ``use_modulated``.
    Images are (H, W, C) arrays in [0, 1].
    """
    import torch

    from .networks import to_batch

    imgs = [src_pair[0], src_pair[1], target_ref, same_kind_truth, other_kind_truth]
    shapes = {np.asarray(im).shape for im in imgs}
    if len(shapes) != 1:
        raise ValidationError(f"all images must share one shape, got {sorted(shapes)}")
    dtype = next(net.parameters()).dtype
    ref1, dist1, ref2 = (to_batch([im], dtype) for im in imgs[:3])
    with torch.no_grad():
        net.eval()
        d, d_mod = net.modulated(ref1, dist1, causal=use_modulated)
        out = net.decode(ref2, d_mod if use_modulated else d)[0].permute(1, 2, 0).double().numpy()
    mse_same = np.mean((out - np.asarray(same_kind_truth, dtype=np.float64)) ** 2)
    mse_other = np.mean((out - np.asarray(other_kind_truth, dtype=np.float64)) ** 2)
    return bool(mse_same < mse_other)


REPRODUCIBLE_KINDS = ("gaussian_blur", "jpeg", "quantization")


def transfer_trials(manifest, split: str | None = "test", source_kinds=REPRODUCIBLE_KINDS, pristine_sources=True):
    """Enumerate counterfactual trials over ordered pairs of distinct references.

    Each trial is ``(label, src_ref, src_dist, target_ref, same_truth, other_truth)`` as paths.
    A distorted source at (kind, level) is checked against the same and a different
    kind at that level on the target. A pristine source ``(I_r1, I_r1)`` is checked
    against the pristine target versus each kind at level 1.

    Noise sources are left out by default: a fresh noise draw cannot match the
    truth's draw pixel for pixel, so even a perfect transfer of "noise at level L"
    scores ``2 sigma^2`` against the noisy truth and often loses to a mild blur.
    """
    recs = manifest.records if split is None else [r for r in manifest.records if r.split == split]
    by_ref = defaultdict(dict)
    for r in recs:
        by_ref[r.ref_path][(r.kind, r.level)] = r.dist_path
    refs = sorted(by_ref)
    kinds = sorted({k for d in by_ref.values() for k, _ in d})
    trials = []
    for r1 in refs:
        for r2 in refs:
            if r1 == r2:
                continue
            for (kind, level), d1 in sorted(by_ref[r1].items()):
                if kind not in source_kinds:
                    continue
                for other in kinds:
                    if other == kind or (other, level) not in by_ref[r2] or (kind, level) not in by_ref[r2]:
                        continue
                    trials.append((f"{kind}_L{level}", r1, d1, r2, by_ref[r2][(kind, level)], by_ref[r2][(other, level)]))
            if pristine_sources:
                for other in kinds:
                    if (other, 1) in by_ref[r2]:
                        trials.append(("pristine", r1, r1, r2, r2, by_ref[r2][(other, 1)]))
    return trials


def counterfactual_suite(net, manifest, trials=None, use_modulated: bool = False, resize: int | None = None) -> dict:
    """Run ``counterfactual_transfer`` over ``trials``; accuracy, exact 95% CI and per-label breakdown."""
    from .imageio import load_image

    trials = transfer_trials(manifest) if trials is None else trials
    if not trials:
        raise ValidationError("no counterfactual trials could be formed")
    size = resize or net.cfg.resolution
    cache = {}

    def img(p):
        if p not in cache:
            cache[p] = load_image(manifest.resolve(p), size)
        return cache[p]

    hits = defaultdict(list)
    for label, r1, d1, r2, same, other in trials:
        ok = counterfactual_transfer(net, (img(r1), img(d1)), img(r2), img(same), img(other), use_modulated)
        hits[label].append(ok)
    flat = [h for v in hits.values() for h in v]
    n, k = len(flat), int(sum(flat))
    lo, hi = binomial_ci(k, n)
    return {
        "acc": k / n,
        "n": n,
        "ci95": [lo, hi],
        "per_source": {lab: float(np.mean(v)) for lab, v in sorted(hits.items())},
    }


# --- report ------------------------------------------------------------------------------------


@dataclass
class EvalReport:
    plcc: float = float("nan")
    srcc: float = float("nan")
    rmse: float = float("nan")
    per_level: list = field(default_factory=list)
    sensitivity: dict = field(default_factory=dict)
    counterfactual_acc: float | None = None
    mean_level_srcc: float = float("nan")
    mean_level_plcc: float = float("nan")
    mean_pairwise_acc: float = float("nan")
    skipped: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("plcc", "srcc"):
            v = getattr(self, name)
            if np.isfinite(v) and not -1.0 - 1e-12 <= v <= 1.0 + 1e-12:
                raise ValidationError(f"{name} must lie in [-1, 1], got {v}")
        if np.isfinite(self.rmse) and self.rmse < 0:
            raise ValidationError("rmse must be non-negative")
        for g in self.per_level:
            acc = g.get("pairwise_acc", 0.5)
            if np.isfinite(acc) and not 0.0 <= acc <= 1.0:
                raise ValidationError("pairwise accuracy must lie in [0, 1]")

    def to_json(self) -> str:
        # NaN is written as null so the file is strict JSON
        return json.dumps(_nan_to_none(asdict(self)), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = _none_to_nan(json.loads(text))
        return cls(**d)

    def flat(self) -> dict:
        out = {
            "plcc": self.plcc,
            "srcc": self.srcc,
            "rmse": self.rmse,
            "mean_level_srcc": self.mean_level_srcc,
            "mean_level_plcc": self.mean_level_plcc,
            "mean_pairwise_acc": self.mean_pairwise_acc,
            "counterfactual_acc": self.counterfactual_acc,
        }
        for k in ("slope_srcc", "slope_plcc", "mean_curve_srcc"):
            out[f"sensitivity_{k}"] = self.sensitivity.get(k, float("nan"))
        for g in self.per_level:
            for k in ("srcc", "plcc", "pairwise_acc"):
                out[f"{g['kind']}_L{g['level']}_{k}"] = g[k]
        return out

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(self.to_json() + "\n")
        with open(directory / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for k, v in self.flat().items():
                w.writerow([k, "" if v is None else repr(float(v))])


_SCALAR_NAN_FIELDS = {"plcc", "srcc", "rmse", "mean_level_srcc", "mean_level_plcc", "mean_pairwise_acc"}


def _nan_to_none(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def _none_to_nan(d: dict) -> dict:
    def fix(obj, key=None):
        if obj is None and key not in ("counterfactual_acc",):
            return float("nan")
        if isinstance(obj, dict):
            return {k: fix(v, k) for k, v in obj.items()}
        if isinstance(obj, list):
            return [fix(v) for v in obj]
        return obj

    return fix(d)


def evaluate_scores(scores, mos, kinds, levels, ref_ids, mapped=None) -> EvalReport:
    """Overall correlations plus the fixed-level and sensitivity statistics.

    ``mapped`` (logistic-mapped scores) is used for PLCC and RMSE when given;
    SRCC always uses the raw scores.
    """
    scores = np.asarray(scores, dtype=float)
    mos = np.asarray(mos, dtype=float)
    lin = np.asarray(mapped, dtype=float) if mapped is not None else scores
    fl = fixed_level_ranking(scores, mos, kinds, levels, ref_ids)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWarning)
        sens = sensitivity_alignment(scores, mos, levels, ref_ids, kinds)
        overall_srcc = srcc(scores, mos)
    groups = defaultdict(list)
    for g in fl["per_level"]:
        groups[g["kind"]].append(g)
    return EvalReport(
        plcc=_plcc_or_nan(lin, mos),
        srcc=overall_srcc,
        rmse=rmse(lin, mos),
        per_level=fl["per_level"],
        sensitivity={k: sens[k] for k in ("slope_srcc", "slope_plcc", "mean_curve_srcc")},
        mean_level_srcc=fl["mean_srcc"],
        mean_level_plcc=fl["mean_plcc"],
        mean_pairwise_acc=fl["mean_pairwise_acc"],
        skipped=fl["skipped"] + sens["skipped"],
    )
