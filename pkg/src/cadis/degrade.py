"""Synthetic degradations, dataset construction and pristine-disjoint splits."""

from __future__ import annotations

import configparser
import io
import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, InputError, ValidationError
from .imageio import list_images, load_image, save_image, to_uint8

KINDS = ("gaussian_blur", "gaussian_noise", "jpeg", "quantization")
NOISE_KINDS = frozenset({"gaussian_noise"})
SPLITS = ("pretrain", "finetune", "test")
LEVELS = (1, 2, 3, 4, 5)

DEFAULT_SCHEDULES = {
    "gaussian_blur": (0.8, 1.6, 2.4, 3.2, 4.0),
    "gaussian_noise": (0.02, 0.05, 0.10, 0.18, 0.30),
    "jpeg": (60, 40, 25, 15, 7),
    "quantization": (6, 5, 4, 3, 2),
}
# direction in which each schedule must move as the level increases
_SCHEDULE_DIRECTION = {"gaussian_blur": 1, "gaussian_noise": 1, "jpeg": -1, "quantization": -1}

MANIFEST_KEYS = ("ref_path", "dist_path", "kind", "level", "seed", "split", "mos")


def _check_kind(kind: str) -> None:
    if kind not in KINDS:
        raise ConfigurationError(f"unknown degradation kind {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    level: int
    seed: int | None = None

    def __post_init__(self):
        _check_kind(self.kind)
        if isinstance(self.level, bool) or int(self.level) != self.level or self.level not in LEVELS:
            raise ValidationError(f"level must be an integer in 1..5, got {self.level!r}")
        if self.kind in NOISE_KINDS and self.seed is None:
            object.__setattr__(self, "seed", 0)


@dataclass
class DegradationProtocol:
    kinds: tuple = KINDS
    levels_per_kind: int = 5
    schedules: dict = field(default_factory=lambda: dict(DEFAULT_SCHEDULES))

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        if not self.kinds:
            raise ConfigurationError("protocol lists no kinds")
        for k in self.kinds:
            _check_kind(k)
        if not 1 <= self.levels_per_kind <= 5:
            raise ValidationError("levels_per_kind must be in 1..5")
        self.schedules = {k: tuple(v) for k, v in self.schedules.items()}
        for k in self.kinds:
            sched = self.schedules.get(k)
            if sched is None or len(sched) != 5:
                raise ConfigurationError(f"schedule for {k} must list 5 values")
            steps = np.diff(np.asarray(sched, dtype=float)) * _SCHEDULE_DIRECTION[k]
            if np.any(steps <= 0):
                raise ValidationError(f"schedule for {k} is not strictly monotone in level: {sched}")

    @property
    def levels(self) -> tuple:
        return LEVELS[: self.levels_per_kind]

    def parameter(self, kind: str, level: int):
        return self.schedules[kind][level - 1]

    @classmethod
    def from_file(cls, path) -> "DegradationProtocol":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise InputError(f"cannot read protocol file {path}")
        sec = cp["protocol"]
        kinds = tuple(k.strip() for k in sec.get("kinds", ",".join(KINDS)).split(",") if k.strip())
        schedules = dict(DEFAULT_SCHEDULES)
        if cp.has_section("schedule"):
            for k, v in cp["schedule"].items():
                _check_kind(k)
                vals = [float(x) for x in v.split(",")]
                schedules[k] = tuple(int(x) if k in ("jpeg", "quantization") else x for x in vals)
        return cls(kinds=kinds, levels_per_kind=sec.getint("levels_per_kind", 5), schedules=schedules)

    def to_file(self, path) -> None:
        cp = configparser.ConfigParser()
        cp["protocol"] = {"kinds": ", ".join(self.kinds), "levels_per_kind": str(self.levels_per_kind)}
        cp["schedule"] = {k: ", ".join(str(v) for v in self.schedules[k]) for k in self.kinds}
        with open(path, "w") as fh:
            cp.write(fh)


def _jpeg(img: np.ndarray, quality: int) -> np.ndarray:
    arr = to_uint8(img)
    squeeze = arr.ndim == 3 and arr.shape[2] == 1
    pil = Image.fromarray(arr[:, :, 0] if squeeze else arr)
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(quality))
    out = np.asarray(Image.open(io.BytesIO(buf.getvalue())), dtype=np.float64) / 255.0
    return out[:, :, None] if squeeze else out


def apply_degradation(img: np.ndarray, spec: DegradationSpec, protocol: DegradationProtocol | None = None) -> np.ndarray:
    """Degrade ``img`` (H, W[, C], values in [0, 1]); output has the same shape and dtype."""
    if not isinstance(spec, DegradationSpec):
        raise ConfigurationError("spec must be a DegradationSpec")
    img = np.asarray(img)
    if img.ndim not in (2, 3):
        raise ValidationError(f"expected an (H, W) or (H, W, C) image, got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValidationError("image values must lie in [0, 1]")
    schedules = protocol.schedules if protocol is not None else DEFAULT_SCHEDULES
    param = schedules[spec.kind][spec.level - 1]
    x = img.astype(np.float64)

    if spec.kind == "gaussian_blur":
        sigma = (param, param) + (0,) * (x.ndim - 2)
        out = ndimage.gaussian_filter(x, sigma=sigma, mode="reflect")
    elif spec.kind == "gaussian_noise":
        rng = np.random.default_rng(spec.seed)
        out = x + rng.normal(0.0, param, size=x.shape)
    elif spec.kind == "jpeg":
        out = _jpeg(x, param)
    else:
        n = 2 ** int(param) - 1
        out = np.round(x * n) / n
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


@dataclass
class Record:
    ref_path: str
    dist_path: str
    kind: str
    level: int
    seed: int | None = None
    split: str = "pretrain"
    mos: float | None = None

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in MANIFEST_KEYS})


@dataclass
class Manifest:
    """Records plus the directory their relative paths are resolved against."""

    records: list = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p

    def pristine(self) -> list[str]:
        return sorted({r.ref_path for r in self.records})

    def subset(self, split: str | None = None, kinds=None, levels=None) -> "Manifest":
        recs = [
            r
            for r in self.records
            if (split is None or r.split == split)
            and (kinds is None or r.kind in kinds)
            and (levels is None or r.level in levels)
        ]
        return Manifest(recs, self.root)

    def labeled(self) -> "Manifest":
        return Manifest([r for r in self.records if r.mos is not None], self.root)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"manifest {path} does not exist")
        records = []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                raw = json.loads(line)
                if set(raw) != set(MANIFEST_KEYS):
                    raise ValidationError(f"{path}:{n}: manifest keys must be exactly {MANIFEST_KEYS}")
                records.append(Record(**raw))
        return cls(records, path.parent)

    def check(self, check_files: bool = True) -> None:
        """Raise if the split-disjointness or file invariants do not hold."""
        test_refs = {r.ref_path for r in self.records if r.split == "test"}
        train_refs = {r.ref_path for r in self.records if r.split != "test"}
        shared = test_refs & train_refs
        if shared:
            raise ValidationError(f"pristine images shared between test and training splits: {sorted(shared)[:3]}")
        for r in self.records:
            if r.split not in SPLITS:
                raise ValidationError(f"unknown split {r.split!r}")
            if not check_files:
                continue
            dist, ref = self.resolve(r.dist_path), self.resolve(r.ref_path)
            if not dist.is_file():
                raise ValidationError(f"missing distorted image {dist}")
            if Image.open(dist).size != Image.open(ref).size:
                raise ValidationError(f"{dist} and {ref} differ in size")


def derive_seed(seed: int, name: str, kind: str, level: int) -> int:
    """64-bit noise seed, a pure function of the run seed and the record identity."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode()), KINDS.index(kind), level])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def build_dataset(pristine_dir, protocol: DegradationProtocol, out_dir, seed: int = 0, workers: int = 1) -> Manifest:
    """Degrade every pristine image at every (kind, level) and write ``manifest.jsonl``.

    References are re-encoded as PNG under ``out_dir/ref``; distorted images go
    to ``out_dir/dist``. Paths in the manifest are relative to ``out_dir``.
    """
    sources = list_images(pristine_dir)
    if not sources:
        raise InputError(f"no decodable images in {pristine_dir}")
    out_dir = Path(out_dir)
    try:
        (out_dir / "ref").mkdir(parents=True, exist_ok=True)
        (out_dir / "dist").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out_dir}: {exc}") from exc

    def work(src: Path) -> list[Record]:
        img = load_image(src)
        ref_rel = f"ref/{src.stem}.png"
        save_image(img, out_dir / ref_rel)
        recs = []
        for kind in protocol.kinds:
            for level in protocol.levels:
                s = derive_seed(seed, src.stem, kind, level) if kind in NOISE_KINDS else None
                out = apply_degradation(img, DegradationSpec(kind, level, s), protocol)
                dist_rel = f"dist/{src.stem}__{kind}_L{level}.png"
                save_image(out, out_dir / dist_rel)
                recs.append(Record(ref_rel, dist_rel, kind, level, s))
        return recs

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(work, sources))
    else:
        chunks = [work(s) for s in sources]
    records = sorted((r for c in chunks for r in c), key=lambda r: (r.ref_path, r.kind, r.level))
    manifest = Manifest(records, out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


def _allocate(n: int, ratios) -> list[int]:
    """Largest-remainder allocation of ``n`` items, at least one per nonzero ratio."""
    raw = np.asarray(ratios, dtype=float) * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    for i in np.nonzero((np.asarray(ratios) > 0) & (counts == 0))[0]:
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[i] += 1
    return counts.tolist()


def split_manifest(manifest: Manifest, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> Manifest:
    """Assign (pretrain, finetune, test) splits per pristine image."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    refs = manifest.pristine()
    nonzero = sum(r > 0 for r in ratios)
    if len(refs) < nonzero:
        raise InputError(f"{len(refs)} pristine images cannot fill {nonzero} non-empty splits")
    perm = np.random.default_rng(seed).permutation(len(refs))
    counts = _allocate(len(refs), ratios)
    assignment, start = {}, 0
    for split, c in zip(SPLITS, counts):
        for i in perm[start : start + c]:
            assignment[refs[i]] = split
        start += c
    records = [Record(**{**asdict(r), "split": assignment[r.ref_path]}) for r in manifest.records]
    return Manifest(records, manifest.root)
