"""Autograd gradients of every loss versus central finite differences."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from . import losses as L


@dataclass
class GradCase:
    name: str
    fn: Callable[..., torch.Tensor]
    inputs: list[torch.Tensor]


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    passed: bool


def gradcheck_cases(cfg: L.ContrastiveConfig = L.ContrastiveConfig(), seed: int = 0,
                    channels: int = 2, side: int = 3, n: int = 2, m: int = 2) -> list[GradCase]:
    """Seeded double-precision inputs for the six differentiable losses."""
    g = torch.Generator().manual_seed(seed)

    def randn(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    sp = (side,) * 3
    log_t = torch.tensor(1.0, dtype=torch.float64)   # t = e, keeps the sigmoid off saturation
    labels = torch.randint(0, 3, (n,) + sp, generator=g)
    labels[:, 0, 0, 0] = torch.arange(n) % 3         # make sure class 0 is present
    weights = L.class_weights(labels, 3).double()
    recon = randn(n, m, *sp)
    # keep every residual away from the |.| kink
    gap = (0.1 + randn(n, m, *sp).abs()) * torch.where(randn(n, m, *sp) > 0, 1.0, -1.0)

    return [
        GradCase("ssim", lambda a, b: L.ssim_channel_mean(a, b, cfg.ssim_c1, cfg.ssim_c2),
                 [randn(channels, *sp), randn(channels, *sp)]),
        GradCase("ana", lambda a, lt: L.anatomical_contrastive_loss(L.PairBatch.from_grid(a), cfg, lt.exp()),
                 [randn(n, m, channels, *sp), log_t.clone()]),
        GradCase("mod", lambda v, lt: L.modality_contrastive_loss(L.PairBatch.from_grid(v), cfg, lt.exp()),
                 [randn(n, m, 8), log_t.clone()]),
        GradCase("rec", L.reconstruction_loss, [recon, recon + gap]),
        GradCase("wce", lambda z: L.weighted_cross_entropy(z, labels, weights), [randn(n, 3, *sp)]),
        GradCase("dice", lambda z: L.soft_dice_loss(z, labels), [randn(n, 3, *sp)]),
    ]


def analytic_grad(case: GradCase) -> list[torch.Tensor]:
    xs = [x.detach().clone().requires_grad_(True) for x in case.inputs]
    out = case.fn(*xs)
    return list(torch.autograd.grad(out, xs, allow_unused=True))


@torch.no_grad()
def numeric_grad(case: GradCase, h: float = 1e-4) -> list[torch.Tensor]:
    xs = [x.detach().clone() for x in case.inputs]
    grads = []
    for x in xs:
        gx = torch.zeros_like(x)
        flat, gflat = x.view(-1), gx.view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + h
            fp = float(case.fn(*xs))
            flat[k] = orig - h
            fm = float(case.fn(*xs))
            flat[k] = orig
            gflat[k] = (fp - fm) / (2 * h)
        grads.append(gx)
    return grads


def relative_error(analytic, numeric) -> float:
    err = max(float((a if a is not None else torch.zeros_like(b)).sub(b).abs().max())
              for a, b in zip(analytic, numeric))
    scale = max(float(b.abs().max()) for b in numeric)
    return err / max(scale, 1e-12)


def run_gradcheck(cases: list[GradCase] | None = None, reference: list[GradCase] | None = None,
                  h: float = 1e-4, tol: float = 1e-4) -> list[GradResult]:
    """Compare autograd on ``cases`` with finite differences on ``reference``.

    ``reference`` defaults to ``cases``; passing a different set is how a
    deliberately broken build is caught.
    """
    cases = cases if cases is not None else gradcheck_cases()
    reference = reference if reference is not None else cases
    results = []
    for case, ref in zip(cases, reference):
        err = relative_error(analytic_grad(case), numeric_grad(ref, h))
        results.append(GradResult(case.name, err, err < tol))
    return results


def format_results(results: list[GradResult]) -> str:
    lines = [f"{'loss':<8}{'max_rel_err':>14}  status"]
    for r in results:
        lines.append(f"{r.name:<8}{r.max_rel_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
