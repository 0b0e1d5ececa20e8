"""Missing-modality evaluation: every modality subset, region Dice, reports."""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import MultimodalVolume
from .losses import pairwise_cosine, pairwise_ssim
from .networks import DCSeg

# Conventional missing-modality table row order, columns (FLAIR, T1, T1c, T2).
TABLE_ORDER_4 = [
    (0, 0, 0, 1), (0, 0, 1, 0), (0, 1, 0, 0), (1, 0, 0, 0),
    (0, 0, 1, 1), (0, 1, 1, 0), (1, 1, 0, 0), (0, 1, 0, 1), (1, 0, 0, 1), (1, 0, 1, 0),
    (1, 1, 1, 0), (1, 1, 0, 1), (1, 0, 1, 1), (0, 1, 1, 1),
    (1, 1, 1, 1),
]


@dataclass(frozen=True)
class RegionSpec:
    name: str
    class_ids: frozenset[int]

    def __post_init__(self):
        if not self.class_ids:
            raise ValueError("region needs at least one class")
        object.__setattr__(self, "class_ids", frozenset(self.class_ids))

    def mask(self, label: np.ndarray) -> np.ndarray:
        return np.isin(label, sorted(self.class_ids))


def brats_regions() -> list[RegionSpec]:
    """Whole tumour / tumour core / enhancing tumour on remapped labels {0,1,2,3}."""
    return [RegionSpec("complete", frozenset({1, 2, 3})),
            RegionSpec("core", frozenset({1, 3})),
            RegionSpec("enhancing", frozenset({3}))]


def lesion_regions(class_count: int) -> list[RegionSpec]:
    if class_count == 4:
        return brats_regions()
    return [RegionSpec("lesion", frozenset(range(1, class_count)))]


def subset_order(m: int) -> list[tuple[int, ...]]:
    """All 2^m - 1 non-empty availability patterns, in reporting order.

    For four modalities this is TABLE_ORDER_4; otherwise by
    subset size, then lexicographically.
    """
    if m == 4:
        return list(TABLE_ORDER_4)
    subsets = [s for s in itertools.product((0, 1), repeat=m) if any(s)]
    return sorted(subsets, key=lambda s: (sum(s), tuple(-v for v in s)))


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2 * np.logical_and(pred, gt).sum() / denom)


# --------------------------------------------------------------------- inference

def _window_starts(size: int, patch: int) -> list[int]:
    if size <= patch:
        return [0]
    stride = max(patch // 2, 1)
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def _pad_to(vol: np.ndarray, side: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    shape = vol.shape[-3:]
    pads = [(0, max(side - s, 0)) for s in shape]
    if any(p[1] for p in pads):
        vol = np.pad(vol, [(0, 0)] * (vol.ndim - 3) + pads)
    return vol, shape


@torch.no_grad()
def sliding_window_logits(model: DCSeg, volumes: np.ndarray, subsets) -> list[torch.Tensor]:
    """Averaged fused logits ``(K, D, H, W)`` for each availability pattern.

    Windows of ``patch_side`` with 50% overlap. Encoders run once per window;
    only fusion and the fused decoder see the availability mask.
    """
    model.eval()
    cfg = model.cfg
    p = cfg.patch_side
    vols, orig = _pad_to(volumes.astype(np.float32), p)
    shape = vols.shape[1:]
    dev = next(model.parameters()).device
    masks = torch.as_tensor(np.asarray(subsets, bool), device=dev)
    if (~masks.any(1)).any():
        raise ValueError("empty modality subset")
    acc = torch.zeros((len(masks), cfg.class_count) + shape, device=dev)
    counts = torch.zeros(shape, device=dev)
    for z0, y0, x0 in itertools.product(*(_window_starts(s, p) for s in shape)):
        win = torch.from_numpy(np.ascontiguousarray(vols[:, z0:z0 + p, y0:y0 + p, x0:x0 + p])).to(dev)
        anat, _ = model.encode_all(win[None])
        anat = anat.expand(len(masks), *anat.shape[1:])
        logits = model.decode_fused(model.fuse(anat, masks))
        acc[:, :, z0:z0 + p, y0:y0 + p, x0:x0 + p] += logits
        counts[z0:z0 + p, y0:y0 + p, x0:x0 + p] += 1
    acc /= counts
    d, h, w = orig
    return list(acc[:, :, :d, :h, :w])


def infer_subset(model: DCSeg, subject: MultimodalVolume, subset) -> np.ndarray:
    """Label map for ``subject`` seeing only the modalities flagged in ``subset``."""
    subset = np.asarray(subset, bool)
    if not subset.any():
        raise ValueError("empty modality subset")
    (logits,) = sliding_window_logits(model, subject.volumes, [subset])
    return logits.argmax(0).cpu().numpy()


def infer_all_subsets(model: DCSeg, subject: MultimodalVolume, subsets) -> list[np.ndarray]:
    return [lg.argmax(0).cpu().numpy() for lg in sliding_window_logits(model, subject.volumes, subsets)]


# --------------------------------------------------------------------- reports

@dataclass
class SubsetReport:
    modality_names: tuple[str, ...]
    regions: tuple[str, ...]
    subsets: list[tuple[int, ...]]
    dice: np.ndarray                      # (n_subsets, n_regions), mean over subjects
    per_subject: np.ndarray | None = field(default=None, repr=False)

    @property
    def averages(self) -> np.ndarray:
        return self.dice.mean(0)

    def rows(self):
        for s, vals in zip(self.subsets, self.dice):
            for r, v in zip(self.regions, vals):
                yield s, r, float(v)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*self.modality_names, "region", "dice"])
        for s, r, v in self.rows():
            w.writerow([*s, r, f"{v:.6f}"])
        for r, v in zip(self.regions, self.averages):
            w.writerow([*("avg",) * len(self.modality_names), r, f"{v:.6f}"])
        return buf.getvalue()

    def to_markdown(self) -> str:
        names = [n.upper() for n in self.modality_names]
        head = "| " + " | ".join(names + [r.capitalize() for r in self.regions]) + " |"
        sep = "|" + "---|" * (len(names) + len(self.regions))
        lines = [head, sep]
        for s, vals in zip(self.subsets, self.dice):
            marks = ["●" if v else "○" for v in s]
            lines.append("| " + " | ".join(marks + [f"{100 * v:.2f}" for v in vals]) + " |")
        avg = ["Average"] + [""] * (len(names) - 1)
        lines.append("| " + " | ".join(avg + [f"{100 * v:.2f}" for v in self.averages]) + " |")
        return "\n".join(lines) + "\n"

    def size_averages(self) -> dict[int, np.ndarray]:
        """Mean Dice per region over all subsets with k available modalities."""
        sizes = np.array([sum(s) for s in self.subsets])
        return {k: self.dice[sizes == k].mean(0) for k in sorted(set(sizes.tolist()))}

    def lookup(self, subset) -> np.ndarray:
        return self.dice[self.subsets.index(tuple(int(v) for v in subset))]


def evaluate_all_subsets(model: DCSeg, dataset: list[MultimodalVolume], regions: list[RegionSpec],
                         subsets=None) -> SubsetReport:
    if not dataset:
        raise ValueError("empty evaluation dataset")
    m = model.cfg.modality_count
    subsets = list(subsets) if subsets is not None else subset_order(m)
    scores = np.zeros((len(dataset), len(subsets), len(regions)))
    for i, subj in enumerate(dataset):
        if subj.modality_count != m:
            raise ValueError(f"subject {subj.subject_id} has {subj.modality_count} modalities, model expects {m}")
        preds = infer_all_subsets(model, subj, subsets)
        for si, pred in enumerate(preds):
            for ri, reg in enumerate(regions):
                scores[i, si, ri] = dice_score(reg.mask(pred), reg.mask(subj.label))
    return SubsetReport(tuple(model.cfg.modality_names), tuple(r.name for r in regions),
                        [tuple(int(v) for v in s) for s in subsets], scores.mean(0), scores)


def write_report(report: SubsetReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, md_path = out / "subset_report.csv", out / "subset_report.md"
    csv_path.write_text(report.to_csv())
    md_path.write_text(report.to_markdown())
    return csv_path, md_path


# --------------------------------------------------------------------- representations

@torch.no_grad()
def encode_subject(model: DCSeg, subject: MultimodalVolume):
    """Whole-volume anatomical maps (M, C, d, d, d) and modality vectors (M, C_mod).

    Volumes are zero-padded up to a multiple of the downsampling factor.
    """
    model.eval()
    f = model.cfg.downsample_factor
    vols = subject.volumes.astype(np.float32)
    pads = [(0, 0)] + [(0, -s % f) for s in vols.shape[1:]]
    vols = np.pad(vols, pads)
    x = torch.from_numpy(vols)[None].to(next(model.parameters()).device)
    anat, mod = model.encode_all(x)
    return anat[0].cpu(), mod[0].cpu()


def export_representations(model: DCSeg, dataset: list[MultimodalVolume], out_path) -> Path:
    """One record per (subject, modality) and kind: pooled anatomical or modality vector."""
    c, cm = model.cfg.anat_channels, model.cfg.modality_dim
    width = max(c, cm)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["subject_id", "modality", "kind"] + [f"v{k}" for k in range(width)])
        for subj in dataset:
            anat, mod = encode_subject(model, subj)
            pooled = anat.flatten(2).mean(-1)
            for j, name in enumerate(model.cfg.modality_names):
                for kind, vec in (("anatomical", pooled[j]), ("modality", mod[j])):
                    vals = [f"{float(v):.8g}" for v in vec]
                    w.writerow([subj.subject_id, name, kind] + vals + [""] * (width - len(vals)))
    return out_path


def read_representations(path) -> list[dict]:
    with Path(path).open() as f:
        rows = []
        for r in csv.DictReader(f):
            vec = [float(r[k]) for k in r if k.startswith("v") and r[k] != ""]
            rows.append({"subject_id": r["subject_id"], "modality": r["modality"],
                         "kind": r["kind"], "vector": np.array(vec)})
        return rows


@dataclass
class AlignmentStats:
    intra_subject_ssim: float
    inter_subject_ssim: float
    intra_modality_cos: float
    inter_modality_cos: float

    @property
    def anatomical_gap(self) -> float:
        return self.intra_subject_ssim - self.inter_subject_ssim

    @property
    def modality_gap(self) -> float:
        return self.intra_modality_cos - self.inter_modality_cos


def representation_alignment(model: DCSeg, dataset: list[MultimodalVolume], c1=None, c2=None) -> AlignmentStats:
    """Mean pairwise similarities split by same/different subject and modality.

    Self-pairs are excluded from every mean.
    """
    from .losses import SSIM_C1, SSIM_C2
    anats, mods, sids, mids = [], [], [], []
    for i, subj in enumerate(dataset):
        a, m = encode_subject(model, subj)
        anats.append(a.double())
        mods.append(m.double())
        sids += [i] * len(a)
        mids += list(range(len(a)))
    ssim = pairwise_ssim(torch.cat(anats), c1 or SSIM_C1, c2 or SSIM_C2).numpy()
    cos = pairwise_cosine(torch.cat(mods)).numpy()
    sids, mids = np.array(sids), np.array(mids)
    off = ~np.eye(len(sids), dtype=bool)
    same_s = (sids[:, None] == sids[None]) & off
    diff_s = sids[:, None] != sids[None]
    same_m = (mids[:, None] == mids[None]) & off
    diff_m = mids[:, None] != mids[None]
    nan = float("nan")
    return AlignmentStats(
        float(ssim[same_s].mean()) if same_s.any() else nan,
        float(ssim[diff_s].mean()) if diff_s.any() else nan,
        float(cos[same_m].mean()) if same_m.any() else nan,
        float(cos[diff_m].mean()) if diff_m.any() else nan,
    )
