"""Loss and similarity primitives for disentangled contrastive segmentation.

Everything here is a pure function of tensors; gradients come from autograd.
Shapes follow the torch convention of channels first.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
DICE_EPS = 1e-5


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 10.0
    ssim_c1: float = SSIM_C1
    ssim_c2: float = SSIM_C2
    include_self_pairs: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not (self.ssim_c1 > 0 and self.ssim_c2 > 0):
            raise ValueError("SSIM constants must be positive")


@dataclass
class PairBatch:
    """N*M representations tagged with (sample, modality) indices.

    ``reps`` has the items on its first axis. Use :meth:`from_grid` for the
    usual ``(N, M, ...)`` layout coming out of the network.
    """

    reps: torch.Tensor
    sample_ids: torch.Tensor
    modality_ids: torch.Tensor

    def __post_init__(self):
        p = self.reps.shape[0] if self.reps.ndim else 0
        if p == 0:
            raise ValueError("empty pair batch")
        if self.sample_ids.shape != (p,) or self.modality_ids.shape != (p,):
            raise ValueError("sample_ids / modality_ids must have one entry per item")
        keys = set(zip(self.sample_ids.tolist(), self.modality_ids.tolist()))
        if len(keys) != p:
            raise ValueError("duplicate (sample, modality) items in batch")
        n = len(set(self.sample_ids.tolist()))
        m = len(set(self.modality_ids.tolist()))
        if n * m != p:
            raise ValueError(f"batch is not a full N x M grid ({p} items, N={n}, M={m})")

    @classmethod
    def from_grid(cls, grid: torch.Tensor) -> "PairBatch":
        n, m = grid.shape[:2]
        sample_ids = torch.arange(n).repeat_interleave(m)
        modality_ids = torch.arange(m).repeat(n)
        return cls(grid.reshape(n * m, *grid.shape[2:]), sample_ids, modality_ids)

    @property
    def n_samples(self) -> int:
        return len(set(self.sample_ids.tolist()))

    @property
    def n_modalities(self) -> int:
        return len(set(self.modality_ids.tolist()))

    def permuted(self, perm: torch.Tensor) -> "PairBatch":
        return PairBatch(self.reps[perm], self.sample_ids[perm], self.modality_ids[perm])


def _check_finite(name: str, x: torch.Tensor):
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


def _ssim_from_moments(mu_a, mu_b, var_a, var_b, cov, c1, c2):
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim_channel_mean(a: torch.Tensor, b: torch.Tensor,
                      c1: float = SSIM_C1, c2: float = SSIM_C2) -> torch.Tensor:
    """Global (non-windowed) SSIM per channel, averaged over channels.

    ``a`` and ``b`` are ``(C, *spatial)``. Statistics use the population
    (1/V) normalisation over all voxels of a channel.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim < 2:
        raise ValueError("expected a (C, *spatial) feature map")
    if not (c1 > 0 and c2 > 0):
        raise ValueError("SSIM constants must be positive")
    _check_finite("a", a)
    _check_finite("b", b)
    fa = a.reshape(a.shape[0], -1)
    fb = b.reshape(b.shape[0], -1)
    mu_a, mu_b = fa.mean(1), fb.mean(1)
    da, db = fa - mu_a[:, None], fb - mu_b[:, None]
    var_a, var_b = (da * da).mean(1), (db * db).mean(1)
    cov = (da * db).mean(1)
    return _ssim_from_moments(mu_a, mu_b, var_a, var_b, cov, c1, c2).mean()


def pairwise_ssim(feats: torch.Tensor, c1: float = SSIM_C1, c2: float = SSIM_C2) -> torch.Tensor:
    """(P, C, *spatial) -> (P, P) matrix of channel-mean SSIM values."""
    p, c = feats.shape[:2]
    x = feats.reshape(p, c, -1)
    mu = x.mean(-1)                                   # (P, C)
    xc = x - mu[..., None]
    var = (xc * xc).mean(-1)                          # (P, C)
    cov = torch.einsum("pcv,qcv->pqc", xc, xc) / x.shape[-1]
    s = _ssim_from_moments(mu[:, None], mu[None], var[:, None], var[None], cov, c1, c2)
    # the diagonal is exactly 1 by construction; pin it against rounding
    eye = torch.eye(p, dtype=torch.bool, device=feats.device)
    s = s.mean(-1)
    return torch.where(eye, torch.ones_like(s), s)


def pairwise_cosine(vecs: torch.Tensor) -> torch.Tensor:
    norms = vecs.norm(dim=-1)
    if (norms == 0).any():
        raise ValueError("zero-norm modality vector: cosine similarity undefined")
    u = vecs / norms[:, None]
    s = u @ u.T
    eye = torch.eye(len(vecs), dtype=torch.bool, device=vecs.device)
    return torch.where(eye, torch.ones_like(s), s)


def pair_indicator(u: int, u_prime: int) -> int:
    return 1 if u == u_prime else -1


def pair_indicator_matrix(ids: torch.Tensor) -> torch.Tensor:
    """+1 where ids match, -1 elsewhere."""
    same = ids[:, None] == ids[None, :]
    return same.to(torch.get_default_dtype()) * 2 - 1


def sigmoid_pair_loss(sim: torch.Tensor, signs: torch.Tensor, temperature,
                      include_self_pairs: bool = True) -> torch.Tensor:
    """-mean over pairs of log sigmoid(sign * t * sim)."""
    terms = -F.logsigmoid(signs.to(sim.dtype) * temperature * sim)
    if include_self_pairs:
        return terms.mean()
    p = sim.shape[0]
    if p < 2:
        raise ValueError("need at least two items when self-pairs are excluded")
    off = ~torch.eye(p, dtype=torch.bool, device=sim.device)
    return terms[off].mean()


def _temperature(cfg: ContrastiveConfig, temperature):
    return cfg.temperature if temperature is None else temperature


def anatomical_contrastive_loss(batch: PairBatch, cfg: ContrastiveConfig = ContrastiveConfig(),
                                temperature=None) -> torch.Tensor:
    """Sigmoid contrastive loss over SSIM of anatomical maps.

    Positives are items from the same subject. ``temperature`` (a tensor)
    overrides ``cfg.temperature`` so a learnable value can be plugged in.
    """
    _check_finite("anatomical maps", batch.reps)
    sim = pairwise_ssim(batch.reps, cfg.ssim_c1, cfg.ssim_c2)
    signs = pair_indicator_matrix(batch.sample_ids)
    return sigmoid_pair_loss(sim, signs, _temperature(cfg, temperature), cfg.include_self_pairs)


def modality_contrastive_loss(batch: PairBatch, cfg: ContrastiveConfig = ContrastiveConfig(),
                              temperature=None) -> torch.Tensor:
    """Sigmoid contrastive loss over cosine similarity; positives share a modality."""
    _check_finite("modality vectors", batch.reps)
    sim = pairwise_cosine(batch.reps.reshape(batch.reps.shape[0], -1))
    signs = pair_indicator_matrix(batch.modality_ids)
    return sigmoid_pair_loss(sim, signs, _temperature(cfg, temperature), cfg.include_self_pairs)


def _as_stack(vols) -> torch.Tensor:
    if isinstance(vols, torch.Tensor):
        return vols
    return torch.stack(list(vols))


def reconstruction_loss(reconstructions, targets) -> torch.Tensor:
    """L1 reconstruction error.

    Inputs are ``(M, *spatial)`` (or a list of M volumes) for one subject, or
    ``(N, M, *spatial)`` for a batch. Voxel-mean per modality, summed over
    modalities, averaged over the batch.
    """
    r, x = _as_stack(reconstructions), _as_stack(targets)
    if r.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(r.shape)} vs {tuple(x.shape)}")
    if r.ndim == 4:
        r, x = r[None], x[None]
    if r.ndim != 5:
        raise ValueError("expected (M, D, H, W) or (N, M, D, H, W)")
    per_mod = (r - x).abs().flatten(2).mean(-1)       # (N, M)
    return per_mod.sum(1).mean()


def _batched(logits: torch.Tensor, labels: torch.Tensor):
    if logits.ndim == labels.ndim + 1 and logits.ndim in (4, 5):
        if logits.ndim == 4:
            logits, labels = logits[None], labels[None]
    else:
        raise ValueError(f"logits {tuple(logits.shape)} incompatible with labels {tuple(labels.shape)}")
    if logits.shape[2:] != labels.shape[1:] or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} incompatible with labels {tuple(labels.shape)}")
    k = logits.shape[1]
    if k < 2:
        raise ValueError("need at least two classes")
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return logits, labels.long()


def class_weights(labels: torch.Tensor, num_classes: int, clip=(1.0, 50.0)) -> torch.Tensor:
    """Inverse-frequency class weights, clipped, mean 1 over the classes present.

    Classes absent from ``labels`` get the upper clip value; they never
    contribute to the loss and are left out of the normalisation.
    """
    counts = torch.bincount(labels.reshape(-1).long(), minlength=num_classes).to(torch.get_default_dtype())
    present = counts > 0
    freq = counts / counts.sum()
    w = torch.full_like(freq, clip[1])
    w[present] = (1.0 / freq[present]).clamp(*clip)
    w[present] = w[present] / w[present].mean()
    return w


def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor,
                           weights: torch.Tensor | Sequence[float] | None = None) -> torch.Tensor:
    """Voxel mean of ``w[y] * -log softmax(logits)[y]``."""
    logits, labels = _batched(logits, labels)
    k = logits.shape[1]
    if weights is None:
        weights = torch.ones(k, dtype=logits.dtype, device=logits.device)
    weights = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
    if weights.shape != (k,):
        raise ValueError(f"expected {k} class weights, got {tuple(weights.shape)}")
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, labels[:, None]).squeeze(1)
    return (weights[labels] * nll).mean()


def soft_dice_loss(logits: torch.Tensor, labels: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - soft Dice, averaged over foreground classes then over the batch."""
    logits, labels = _batched(logits, labels)
    k = logits.shape[1]
    p = F.softmax(logits, dim=1).flatten(2)[:, 1:]
    g = F.one_hot(labels.flatten(1), k).permute(0, 2, 1)[:, 1:].to(p.dtype)
    inter = (p * g).sum(-1)
    dice = (2 * inter + eps) / (p.sum(-1) + g.sum(-1) + eps)
    return (1 - dice).mean()


def segmentation_loss(logits: torch.Tensor, labels: torch.Tensor,
                      weights: torch.Tensor | None = None) -> torch.Tensor:
    """WCE + Dice, with batch inverse-frequency weights unless given."""
    if weights is None:
        weights = class_weights(labels, logits.shape[-4]).to(logits)
    return weighted_cross_entropy(logits, labels, weights) + soft_dice_loss(logits, labels)


def disentangle_loss(ana, mod, rec):
    return ana + mod + rec


def total_loss(seg, reg, disentangle, alpha: float = 0.4):
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return seg + reg + alpha * disentangle
