"""Synthetic multi-phase liver CT phantoms.

Each case is a body ellipsoid containing a liver ellipsoid with K ellipsoidal
lesions. Geometry is identical across phases (the volumes are pre-registered);
only intensities change, following a per-class enhancement profile. The
intensity tables below are invented, clinically motivated defaults: liver
parenchyma brightens through the venous phase, HCC washes in on the arterial
phase and out afterwards, cysts stay dark, calcifications stay bright, and so on.

On-disk layout of one case directory::

    meta.json          case_id, phases_present, grid shape, K, labels, checksums
    <phase>.f32        little-endian float32 volume, C order (z, y, x)
    liver.u8           uint8 {0, 1} liver mask
    lesion_<j>.u8      uint8 {0, 1} instance mask j
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from liverdx.errors import ConfigError, CorruptDataError, FormatError
from liverdx.labels import CLASS_NAMES, NUM_CLASSES, OTHERS, PHASES, class_index

# (mean offset, spread) relative to liver parenchyma, per phase NC, A, V, D.
# "others" holds several distinct profiles under one label.
DEFAULT_ENHANCEMENT = {
    "HCC": [[(-10, 5), (40, 8), (-20, 6), (-30, 6)]],
    "ICC": [[(-15, 5), (5, 6), (0, 6), (20, 6)]],
    "meta": [[(-20, 5), (-10, 6), (-35, 6), (-40, 6)]],
    "heman": [[(-15, 5), (25, 8), (20, 6), (10, 6)]],
    "FNH": [[(-5, 4), (55, 8), (5, 5), (0, 5)]],
    "cyst": [[(-40, 4), (-60, 4), (-95, 4), (-80, 4)]],
    "calc": [[(120, 8), (105, 8), (70, 8), (85, 8)]],
    "others": [
        [(-5, 5), (25, 6), (25, 6), (25, 6)],
        [(20, 5), (10, 6), (-10, 6), (-45, 6)],
        [(-30, 5), (-30, 6), (-60, 6), (-10, 6)],
    ],
}

LIVER_INTENSITY = (55.0, 75.0, 110.0, 95.0)
BODY_INTENSITY = (40.0, 50.0, 60.0, 55.0)

# Normalized-radius window of the lesion intensity falloff; the mask boundary
# (radius 1) sits at half maximum.
_FLAT_RADIUS = 0.75
_OUTER_RADIUS = 1.25
_PLACEMENT_TRIES = 500


def _default_table():
    return copy.deepcopy(DEFAULT_ENHANCEMENT)


@dataclass
class PhantomConfig:
    grid_size: int = 48
    num_lesions_range: tuple = (1, 3)
    class_mix: tuple = tuple([1.0 / NUM_CLASSES] * NUM_CLASSES)
    delayed_phase_prob: float = 2.0 / 3.0
    enhancement_table: dict = field(default_factory=_default_table)
    noise_sigma: float = 5.0
    lesion_radius_range: tuple = (3, 6)
    seed: int = 0
    liver_intensity: tuple = LIVER_INTENSITY
    body_intensity: tuple = BODY_INTENSITY

    def validate(self):
        if int(self.grid_size) < 4:
            raise ConfigError("grid_size must be at least 4")
        mix = np.asarray(self.class_mix, dtype=float)
        if mix.shape != (NUM_CLASSES,):
            raise ConfigError(f"class_mix must have {NUM_CLASSES} entries")
        if np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise ConfigError("class_mix entries must be nonnegative and sum to 1 within 1e-9")
        for name in ("num_lesions_range", "lesion_radius_range"):
            lo, hi = getattr(self, name)
            if lo < 1 or lo > hi:
                raise ConfigError(f"{name} must satisfy min >= 1 and min <= max, got {(lo, hi)}")
        if not 0.0 <= self.delayed_phase_prob <= 1.0:
            raise ConfigError("delayed_phase_prob must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        missing = [c for c in CLASS_NAMES if c not in self.enhancement_table]
        if missing:
            raise ConfigError(f"enhancement_table is missing classes {missing}")
        for name in CLASS_NAMES:
            profiles = self.enhancement_table[name]
            if len(profiles) == 0:
                raise ConfigError(f"enhancement_table[{name!r}] has no profile")
            for prof in profiles:
                if len(prof) != len(PHASES) or any(len(cell) != 2 for cell in prof):
                    raise ConfigError(
                        f"enhancement_table[{name!r}] must define (mean, spread) for all 4 phases"
                    )
                if any(cell[1] < 0 for cell in prof):
                    raise ConfigError(f"enhancement_table[{name!r}] has a negative spread")
        for name in ("liver_intensity", "body_intensity"):
            if len(getattr(self, name)) != len(PHASES):
                raise ConfigError(f"{name} must have one value per phase")
        return self

    def to_dict(self):
        d = asdict(self)
        d["enhancement_table"] = {
            k: [[list(cell) for cell in prof] for prof in v] for k, v in self.enhancement_table.items()
        }
        for k in ("num_lesions_range", "class_mix", "lesion_radius_range", "liver_intensity", "body_intensity"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("num_lesions_range", "class_mix", "lesion_radius_range", "liver_intensity", "body_intensity"):
            if k in d:
                d[k] = tuple(d[k])
        if "enhancement_table" in d:
            d["enhancement_table"] = {
                k: [[tuple(cell) for cell in prof] for prof in v] for k, v in d["enhancement_table"].items()
            }
        return cls(**d)


def delayed_only_pair_config(class_a="HCC", class_b="ICC", d_gap=45.0, **overrides):
    """Config whose two lesion classes differ only in the delayed phase.

    Class ``class_b`` copies the NC/A/V rows of ``class_a``; its delayed row is
    shifted by ``d_gap``. Every case carries the delayed phase and exactly one
    lesion of one of the two classes.
    """
    ia, ib = class_index(class_a), class_index(class_b)
    if ia == ib:
        raise ConfigError("delayed-only pair needs two distinct classes")
    table = _default_table()
    row = [tuple(cell) for cell in table[class_a][0]]
    mean_d, spread_d = row[3]
    table[class_b] = [row[:3] + [(mean_d + d_gap, spread_d)]]
    table[class_a] = [row]
    mix = [0.0] * NUM_CLASSES
    mix[ia] = mix[ib] = 0.5
    kw = dict(
        num_lesions_range=(1, 1),
        class_mix=tuple(mix),
        delayed_phase_prob=1.0,
        enhancement_table=table,
    )
    kw.update(overrides)
    return PhantomConfig(**kw).validate()


@dataclass(eq=False)
class Case:
    case_id: str
    phases_present: tuple
    volumes: dict
    liver_mask: np.ndarray
    instance_masks: list
    labels: list

    @property
    def shape(self):
        return self.liver_mask.shape

    @property
    def num_lesions(self):
        return len(self.instance_masks)

    @property
    def has_delayed(self):
        return "D" in self.phases_present

    def foreground(self):
        fg = np.zeros(self.shape, dtype=bool)
        for m in self.instance_masks:
            fg |= m.astype(bool)
        return fg

    def validate(self):
        phases = tuple(self.phases_present)
        if phases not in (PHASES[:3], PHASES):
            raise FormatError(f"phases_present must be (NC, A, V[, D]), got {phases}")
        if set(self.volumes) != set(phases):
            raise FormatError("volumes do not match phases_present")
        shape = self.liver_mask.shape
        if any(v.shape != shape for v in self.volumes.values()):
            raise FormatError("volumes do not share one shape")
        if len(self.instance_masks) != len(self.labels):
            raise FormatError("instance mask count differs from label count")
        liver = self.liver_mask.astype(bool)
        seen = np.zeros(shape, dtype=bool)
        for j, m in enumerate(self.instance_masks):
            m = m.astype(bool)
            if m.shape != shape:
                raise FormatError(f"instance mask {j} has the wrong shape")
            if np.any(m & ~liver):
                raise FormatError(f"instance mask {j} leaves the liver")
            if np.any(m & seen):
                raise FormatError(f"instance mask {j} overlaps another lesion")
            seen |= m
        if any(not 0 <= int(c) < NUM_CLASSES for c in self.labels):
            raise FormatError("lesion label out of range")
        return self

    def digest(self):
        h = hashlib.sha256()
        h.update(self.case_id.encode())
        h.update(",".join(self.phases_present).encode())
        for p in self.phases_present:
            h.update(np.ascontiguousarray(self.volumes[p], dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.liver_mask, dtype=np.uint8).tobytes())
        for m, c in zip(self.instance_masks, self.labels):
            h.update(np.ascontiguousarray(m, dtype=np.uint8).tobytes())
            h.update(str(int(c)).encode())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Case):
            return NotImplemented
        return self.digest() == other.digest()

    __hash__ = None


def _grid(n):
    c = np.arange(n, dtype=np.float64)
    return np.meshgrid(c, c, c, indexing="ij")


def _ellipsoid_radius(zz, yy, xx, center, semi):
    return np.sqrt(
        ((zz - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((xx - center[2]) / semi[2]) ** 2
    )


def _falloff(rho):
    w = np.zeros_like(rho)
    w[rho <= _FLAT_RADIUS] = 1.0
    band = (rho > _FLAT_RADIUS) & (rho < _OUTER_RADIUS)
    t = (rho[band] - _FLAT_RADIUS) / (_OUTER_RADIUS - _FLAT_RADIUS)
    w[band] = 0.5 * (1.0 + np.cos(math.pi * t))
    return w


def generate_case(config: PhantomConfig, case_seed: int) -> Case:
    """Generate one case; the result depends only on ``(config, case_seed)``."""
    config.validate()
    rng = np.random.default_rng([int(config.seed) & (2**63 - 1), int(case_seed)])
    n = int(config.grid_size)
    zz, yy, xx = _grid(n)
    mid = (n - 1) / 2.0

    body = _ellipsoid_radius(zz, yy, xx, (mid, mid, mid), (0.48 * n,) * 3) <= 1.0
    liver_center = mid + rng.uniform(-0.03, 0.03, size=3) * n
    liver_semi = rng.uniform(0.36, 0.41, size=3) * n
    liver = _ellipsoid_radius(zz, yy, xx, liver_center, liver_semi) <= 1.0
    liver &= body

    has_delayed = bool(rng.random() < config.delayed_phase_prob)
    phases = PHASES if has_delayed else PHASES[:3]

    lo, hi = config.num_lesions_range
    k = int(rng.integers(lo, hi + 1))
    mix = np.asarray(config.class_mix, dtype=float)
    labels = [int(c) for c in rng.choice(NUM_CLASSES, size=k, p=mix / mix.sum())]

    rlo, rhi = config.lesion_radius_range
    occupied = np.zeros(liver.shape, dtype=bool)
    liver_idx = np.argwhere(liver)
    masks, weights, offsets = [], [], []
    for label in labels:
        base_r = rng.uniform(rlo, rhi)
        semi = np.maximum(base_r * rng.uniform(0.8, 1.2, size=3), 1.0)
        for attempt in range(_PLACEMENT_TRIES):
            if attempt and attempt % 100 == 0:  # crowded liver: shrink the lesion and keep trying
                semi = np.maximum(semi * 0.85, 1.0)
            center = liver_idx[rng.integers(len(liver_idx))] + rng.uniform(-0.5, 0.5, size=3)
            rho = _ellipsoid_radius(zz, yy, xx, center, semi)
            mask = rho <= 1.0
            halo = rho < _OUTER_RADIUS
            if mask.any() and not np.any(mask & ~liver) and not np.any(halo & occupied):
                break
        else:
            raise ConfigError(
                "could not place a lesion inside the liver; reduce lesion_radius_range or num_lesions_range"
            )
        occupied |= halo
        masks.append(mask)
        weights.append(_falloff(rho))
        profiles = config.enhancement_table[CLASS_NAMES[label]]
        prof = profiles[int(rng.integers(len(profiles)))] if label == OTHERS else profiles[0]
        offsets.append([m + s * rng.standard_normal() for m, s in prof])

    volumes = {}
    for pi, p in enumerate(PHASES):
        vol = config.body_intensity[pi] * body.astype(np.float64)
        vol += (config.liver_intensity[pi] - config.body_intensity[pi]) * liver
        for w, off in zip(weights, offsets):
            vol += off[pi] * w
        vol += config.noise_sigma * rng.standard_normal(vol.shape)
        if p in phases:
            volumes[p] = vol.astype(np.float32)

    case = Case(
        case_id=f"case_{int(case_seed):05d}",
        phases_present=tuple(phases),
        volumes=volumes,
        liver_mask=liver.astype(np.uint8),
        instance_masks=[m.astype(np.uint8) for m in masks],
        labels=labels,
    )
    return case.validate()


# ---------------------------------------------------------------- persistence

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_case(case: Case, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for p in case.phases_present:
        files[f"{p}.f32"] = np.ascontiguousarray(case.volumes[p], dtype="<f4").tobytes()
    files["liver.u8"] = np.ascontiguousarray(case.liver_mask, dtype=np.uint8).tobytes()
    for j, m in enumerate(case.instance_masks):
        files[f"lesion_{j:03d}.u8"] = np.ascontiguousarray(m, dtype=np.uint8).tobytes()
    for name, data in files.items():
        (directory / name).write_bytes(data)
    meta = {
        "case_id": case.case_id,
        "phases_present": list(case.phases_present),
        "grid_size": list(case.shape),
        "K": case.num_lesions,
        "labels": [CLASS_NAMES[int(c)] for c in case.labels],
        "checksums": {name: _sha256(data) for name, data in files.items()},
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    return directory


def _read_blob(directory, name, meta, dtype, shape):
    path = directory / name
    if not path.exists():
        raise CorruptDataError(f"missing file {path}")
    data = path.read_bytes()
    expected = meta["checksums"].get(name)
    if expected is None or _sha256(data) != expected:
        raise CorruptDataError(f"checksum mismatch for {path}")
    count = int(np.prod(shape))
    if len(data) != count * np.dtype(dtype).itemsize:
        raise FormatError(f"{path} holds {len(data)} bytes, metadata shape {tuple(shape)} needs a different size")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def read_case(directory) -> Case:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise CorruptDataError(f"missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptDataError(f"unreadable {meta_path}: {exc}") from exc
    shape = tuple(int(s) for s in meta["grid_size"])
    if len(shape) != 3:
        raise FormatError("grid_size must have three entries")
    if int(meta["K"]) != len(meta["labels"]):
        raise FormatError("K does not match the number of labels")
    volumes = {p: _read_blob(directory, f"{p}.f32", meta, "<f4", shape) for p in meta["phases_present"]}
    liver = _read_blob(directory, "liver.u8", meta, np.uint8, shape)
    masks = [_read_blob(directory, f"lesion_{j:03d}.u8", meta, np.uint8, shape) for j in range(int(meta["K"]))]
    case = Case(
        case_id=meta["case_id"],
        phases_present=tuple(meta["phases_present"]),
        volumes={p: v.astype(np.float32) for p, v in volumes.items()},
        liver_mask=liver,
        instance_masks=masks,
        labels=[class_index(n) for n in meta["labels"]],
    )
    return case.validate()


# -------------------------------------------------------------------- dataset

SPLITS = ("train", "val", "test")


@dataclass
class DatasetIndex:
    root: Path
    splits: dict

    def case_ids(self, split=None):
        if split is None:
            return [cid for s in SPLITS for cid in self.splits.get(s, [])]
        return list(self.splits.get(split, []))

    def case_dir(self, case_id):
        return Path(self.root) / "cases" / case_id

    def load_case(self, case_id) -> Case:
        return read_case(self.case_dir(case_id))

    def load_split(self, split):
        return [self.load_case(cid) for cid in self.case_ids(split)]


def split_sizes(n_cases, split_fracs):
    fracs = [float(f) for f in split_fracs]
    if len(fracs) != 3 or any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ConfigError("split fractions must be three nonnegative numbers summing to 1")
    if all(f > 0 for f in fracs) and n_cases < 3:
        raise ConfigError("n_cases must be at least 3 when every split fraction is positive")
    n_val = math.floor(fracs[1] * n_cases + 1e-9)
    n_test = math.floor(fracs[2] * n_cases + 1e-9)
    return n_cases - n_val - n_test, n_val, n_test


def build_dataset(config: PhantomConfig, n_cases: int, split_fracs, root) -> DatasetIndex:
    """Generate ``n_cases`` cases under ``root/cases`` and write ``root/index.json``."""
    config.validate()
    sizes = split_sizes(int(n_cases), split_fracs)
    root = Path(root)
    ids = []
    for seed in range(int(n_cases)):
        case = generate_case(config, seed)
        write_case(case, root / "cases" / case.case_id)
        ids.append(case.case_id)
    order = np.random.default_rng(int(config.seed) & (2**63 - 1)).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    splits, start = {}, 0
    for name, size in zip(SPLITS, sizes):
        splits[name] = sorted(shuffled[start:start + size])
        start += size
    index = {"n_cases": int(n_cases), "splits": splits, "phantom_config": config.to_dict()}
    (root / "index.json").write_text(json.dumps(index, indent=2))
    return DatasetIndex(root=root, splits=splits)


def load_index(root) -> DatasetIndex:
    root = Path(root)
    path = root / "index.json"
    if not path.exists():
        raise FormatError(f"no dataset index at {path}")
    data = json.loads(path.read_text())
    return DatasetIndex(root=root, splits={k: list(v) for k, v in data["splits"].items()})
