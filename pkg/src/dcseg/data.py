"""Volumes on disk, preprocessing, augmentation and synthetic phantoms."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import nibabel as nib
import numpy as np

BRATS_SUFFIX = {"flair": "flair", "t1": "t1", "t1c": "t1ce", "t2": "t2"}
DEFAULT_MODALITIES = ("flair", "t1", "t1c", "t2")
STD_FLOOR = 1e-6


@dataclass
class MultimodalVolume:
    subject_id: str
    volumes: np.ndarray            # (M, D, H, W) float32
    label: np.ndarray              # (D, H, W) int64
    brain_mask: np.ndarray         # (D, H, W) bool
    modality_names: tuple[str, ...] = DEFAULT_MODALITIES

    def __post_init__(self):
        shape = self.volumes.shape[1:]
        if self.volumes.ndim != 4:
            raise ValueError("volumes must be (M, D, H, W)")
        if self.label.shape != shape or self.brain_mask.shape != shape:
            raise ValueError("label / brain mask shape differs from the volumes")
        if len(self.modality_names) != self.volumes.shape[0]:
            raise ValueError("one modality name per volume required")
        self.modality_names = tuple(self.modality_names)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.volumes.shape[1:]

    @property
    def modality_count(self) -> int:
        return self.volumes.shape[0]


# --------------------------------------------------------------------- preprocessing

def normalize_in_mask(volume: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Z-score ``volume`` over ``mask``; zero outside it.

    A (near) constant volume inside the mask carries no signal and maps to zeros.
    """
    mask = mask.astype(bool)
    if not mask.any():
        raise ValueError("empty brain mask")
    vals = volume[mask].astype(np.float64)
    mu, sd = vals.mean(), vals.std()
    out = np.zeros(volume.shape, dtype=np.float32)
    if sd >= STD_FLOOR:
        out[mask] = (vals - mu) / sd
    return out


def brain_mask_from_volumes(volumes: np.ndarray) -> np.ndarray:
    return np.any(volumes != 0, axis=0)


def remap_brats_labels(label: np.ndarray) -> np.ndarray:
    vals = np.unique(label)
    bad = set(vals.tolist()) - {0, 1, 2, 3, 4}
    if bad:
        raise ValueError(f"unexpected label values {sorted(bad)}")
    out = label.astype(np.int64)
    out[out == 4] = 3
    return out


def _find(dir_path: Path, suffix: str) -> Path | None:
    for ext in (".nii.gz", ".nii"):
        hits = sorted(dir_path.glob(f"*_{suffix}{ext}"))
        if hits:
            return hits[0]
    return None


def load_brats_subject(dir_path, modality_names=DEFAULT_MODALITIES) -> MultimodalVolume:
    """Load one BraTS-layout subject directory, normalised and label-remapped."""
    dir_path = Path(dir_path)
    vols = []
    for name in modality_names:
        f = _find(dir_path, BRATS_SUFFIX.get(name, name))
        if f is None:
            raise FileNotFoundError(f"modality file absent: {name.upper()} in {dir_path}")
        vols.append(np.asarray(nib.load(f).dataobj, dtype=np.float32))
    seg = _find(dir_path, "seg")
    if seg is None:
        raise FileNotFoundError(f"label file absent: SEG in {dir_path}")
    label = np.asarray(nib.load(seg).dataobj)
    shapes = {v.shape for v in vols} | {label.shape}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch across modalities in {dir_path}: {sorted(shapes)}")
    raw = np.stack(vols)
    mask = brain_mask_from_volumes(raw)
    volumes = np.stack([normalize_in_mask(v, mask) for v in raw])
    return MultimodalVolume(dir_path.name, volumes, remap_brats_labels(np.rint(label)), mask,
                            tuple(modality_names))


def write_brats_subject(subject: MultimodalVolume, dir_path) -> Path:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    affine = np.eye(4)
    sid = subject.subject_id
    for name, vol in zip(subject.modality_names, subject.volumes):
        img = nib.Nifti1Image(vol.astype(np.float32), affine)
        nib.save(img, dir_path / f"{sid}_{BRATS_SUFFIX.get(name, name)}.nii.gz")
    nib.save(nib.Nifti1Image(subject.label.astype(np.uint8), affine), dir_path / f"{sid}_seg.nii.gz")
    return dir_path


def list_subject_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir() and _find(p, "seg") is not None)


def load_dataset(root, modality_names=DEFAULT_MODALITIES) -> list[MultimodalVolume]:
    return [load_brats_subject(p, modality_names) for p in list_subject_dirs(root)]


def split_by_subject(subjects, test_fraction: float = 0.2):
    """Deterministic train/test split keyed on a hash of the subject id."""
    train, test = [], []
    for s in subjects:
        sid = s if isinstance(s, str) else s.subject_id
        h = int(hashlib.md5(sid.encode()).hexdigest()[:8], 16) / 0xFFFFFFFF
        (test if h < test_fraction else train).append(s)
    return train, test


# --------------------------------------------------------------------- phantoms

def default_transfers(modality_count: int, class_count: int) -> list[list[float]]:
    """Intensity per tissue class ``[outer, inner, lesion_1, ..., lesion_{K-1}]``.

    The first four are: identity ramp, inverted ramp, lesion-suppressing
    (lesion sits between the two tissue values), lesion-enhancing.
    """
    n_les = class_count - 1
    les = np.linspace(0, 1, n_les + 2)[1:-1] if n_les > 1 else np.array([0.5])
    bases = [
        [0.3, 0.6] + list(0.9 + 0.3 * les),
        [1.0, 0.75] + list(0.45 - 0.2 * les),
        [0.5, 0.8] + list(0.58 + 0.1 * les),
        [0.4, 0.45] + list(1.0 + 0.4 * les),
    ]
    out = []
    for j in range(modality_count):
        b = np.array(bases[j % 4])
        # extra modalities: perturbed copies so every map stays distinct
        out.append((b * (1 + 0.1 * (j // 4))).round(4).tolist())
    return out


@dataclass
class PhantomSpec:
    grid_side: int = 32
    modality_count: int = 4
    class_count: int = 2
    lesion_count: tuple[int, int] = (1, 2)
    lesion_radius: tuple[float, float] = (3.5, 6.0)
    transfers: list[list[float]] | None = None
    noise_sigma: float = 0.05
    seed: int = 0
    modality_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.lesion_count = tuple(self.lesion_count)
        self.lesion_radius = tuple(self.lesion_radius)
        if self.grid_side < 16:
            raise ValueError("grid_side must be >= 16")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.transfers is None:
            self.transfers = default_transfers(self.modality_count, self.class_count)
        self.transfers = [list(map(float, t)) for t in self.transfers]
        if len(self.transfers) != self.modality_count:
            raise ValueError("one transfer map per modality required")
        if any(len(t) != self.class_count + 1 for t in self.transfers):
            raise ValueError("each transfer needs class_count + 1 tissue intensities")
        if len({tuple(t) for t in self.transfers}) != len(self.transfers):
            raise ValueError("transfer maps must be distinct across modalities")
        if self.modality_names is None:
            if self.modality_count == len(DEFAULT_MODALITIES):
                self.modality_names = DEFAULT_MODALITIES
            else:
                self.modality_names = tuple(f"m{j}" for j in range(self.modality_count))
        self.modality_names = tuple(self.modality_names)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesion_count"] = list(self.lesion_count)
        d["lesion_radius"] = list(self.lesion_radius)
        d["modality_names"] = list(self.modality_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)


def _ellipsoid(grid, center, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def phantom_anatomy(spec: PhantomSpec, rng: np.random.Generator, max_retries: int = 200):
    """Tissue map (0 = outside, 1 = outer shell, 2 = inner shell, 2 + k = lesion class k) and label."""
    s = spec.grid_side
    grid = np.meshgrid(*(np.arange(s, dtype=np.float64),) * 3, indexing="ij")
    center = (s - 1) / 2 + rng.uniform(-1.5, 1.5, 3)
    radii = s * rng.uniform(0.36, 0.45, 3)
    brain = _ellipsoid(grid, center, radii)
    inner = _ellipsoid(grid, center + rng.uniform(-1, 1, 3), radii * rng.uniform(0.55, 0.7, 3))
    tissue = np.zeros((s, s, s), np.int64)
    tissue[brain] = 1
    tissue[inner & brain] = 2
    label = np.zeros((s, s, s), np.int64)

    n_les = rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1)
    n_cls = spec.class_count - 1
    for k in range(n_les):
        for _attempt in range(max_retries):
            r = rng.uniform(*spec.lesion_radius)
            c = center + rng.uniform(-1, 1, 3) * radii * 0.6
            d = np.sqrt(sum((g - ci) ** 2 for g, ci in zip(grid, c)))
            sphere = d <= r
            if sphere.any() and brain[sphere].all() and not label[sphere].any():
                break
        else:
            if k >= spec.lesion_count[0]:
                break                   # lesions past the minimum are best-effort on crowded brains
            raise RuntimeError(f"could not place a lesion inside the brain after {max_retries} tries")
        # concentric shells, outermost -> class 1
        shell = np.minimum((d / r * n_cls).astype(np.int64), n_cls - 1)
        cls = n_cls - shell
        label[sphere] = cls[sphere]
        tissue[sphere] = 2 + cls[sphere]
    return tissue, label, brain


def generate_phantom(spec: PhantomSpec, subject_id: str | None = None) -> MultimodalVolume:
    rng = np.random.default_rng(spec.seed)
    tissue, label, brain = phantom_anatomy(spec, rng)
    noise = rng.standard_normal((spec.modality_count,) + tissue.shape)
    vols = []
    for j, transfer in enumerate(spec.transfers):
        lut = np.array([0.0] + transfer)
        raw = lut[tissue] + spec.noise_sigma * noise[j]
        raw[~brain] = 0.0
        vols.append(normalize_in_mask(raw, brain))
    sid = subject_id if subject_id is not None else f"phantom_{spec.seed:05d}"
    return MultimodalVolume(sid, np.stack(vols), label, brain, spec.modality_names)


def phantom_cohort(spec: PhantomSpec, count: int, prefix: str = "phantom") -> list[MultimodalVolume]:
    """``count`` subjects with seeds ``spec.seed, spec.seed + 1, ...``."""
    return [generate_phantom(replace(spec, seed=spec.seed + k), f"{prefix}_{spec.seed + k:05d}")
            for k in range(count)]


def write_phantom_dataset(spec: PhantomSpec, out_dir, count: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for subj in phantom_cohort(spec, count):
        sub_dir = write_brats_subject(subj, out / subj.subject_id)
        seed = int(subj.subject_id.rsplit("_", 1)[1])
        sidecar = replace(spec, seed=seed).to_dict()
        (sub_dir / "phantom_spec.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        ids.append(subj.subject_id)
    manifest = {"count": count, "spec": spec.to_dict(), "subjects": ids}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


# --------------------------------------------------------------------- augmentation

@dataclass
class AugmentationConfig:
    flip_prob: tuple[float, float, float] = (0.5, 0.5, 0.5)
    crop_size: int = 112
    foreground_crop_prob: float = 0.5
    intensity_shift: tuple[float, float] = (-0.1, 0.1)
    intensity_scale: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        self.flip_prob = tuple(self.flip_prob)
        self.intensity_shift = tuple(self.intensity_shift)
        self.intensity_scale = tuple(self.intensity_scale)
        if len(self.flip_prob) != 3 or not all(0 <= p <= 1 for p in self.flip_prob):
            raise ValueError("flip_prob needs three probabilities in [0, 1]")
        if not 0 <= self.foreground_crop_prob <= 1:
            raise ValueError("foreground_crop_prob must be in [0, 1]")
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")


@dataclass
class SpatialTransform:
    origin: tuple[int, int, int]
    size: int
    flips: tuple[bool, bool, bool] = field(default=(False, False, False))

    def apply(self, arr: np.ndarray) -> np.ndarray:
        """Crop then flip the last three axes of ``arr``."""
        o, n = self.origin, self.size
        out = arr[..., o[0]:o[0] + n, o[1]:o[1] + n, o[2]:o[2] + n]
        axes = tuple(arr.ndim - 3 + k for k in range(3) if self.flips[k])
        if axes:
            out = np.flip(out, axis=axes)
        return np.ascontiguousarray(out)


def sample_spatial_transform(shape, label, cfg: AugmentationConfig, rng: np.random.Generator) -> SpatialTransform:
    n = cfg.crop_size
    if any(n > s for s in shape):
        raise ValueError(f"crop {n} larger than volume {tuple(shape)}")
    fg = np.argwhere(label > 0) if label is not None else np.empty((0, 3))
    if len(fg) and rng.random() < cfg.foreground_crop_prob:
        c = fg[rng.integers(len(fg))]
        origin = [int(np.clip(c[k] - n // 2, 0, shape[k] - n)) for k in range(3)]
    else:
        origin = [int(rng.integers(0, shape[k] - n + 1)) for k in range(3)]
    flips = tuple(bool(rng.random() < p) for p in cfg.flip_prob)
    return SpatialTransform(tuple(origin), n, flips)


def augment(subject: MultimodalVolume, cfg: AugmentationConfig,
            rng: np.random.Generator | None = None) -> MultimodalVolume:
    """Random crop + flips shared by all channels, then per-modality intensity jitter.

    Intensity changes touch images only, inside the brain mask.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    t = sample_spatial_transform(subject.shape, subject.label, cfg, rng)
    vols = t.apply(subject.volumes).astype(np.float32)
    mask = t.apply(subject.brain_mask)
    label = t.apply(subject.label)
    lo, hi = cfg.intensity_scale
    slo, shi = cfg.intensity_shift
    for j in range(vols.shape[0]):
        scale, shift = rng.uniform(lo, hi), rng.uniform(slo, shi)
        vols[j][mask] = vols[j][mask] * scale + shift
    return MultimodalVolume(subject.subject_id, vols, label, mask, subject.modality_names)


def ensure_dir_writable(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    if not os.access(p, os.W_OK):
        raise PermissionError(f"directory not writable: {p}")
    return p
