"""Optimisation loop: modality dropout, loss assembly, Adam, checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .data import AugmentationConfig, MultimodalVolume, augment
from .networks import DCSeg, ModelConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = "dcseg_ckpt_v1"
METRIC_FIELDS = ["step", "epoch", "l_seg", "l_reg", "l_ana", "l_mod", "l_rec", "total", "t_value"]
LOSS_SWITCHES = ("ana", "mod", "rec", "reg")


class TrainingDiverged(RuntimeError):
    def __init__(self, component: str, step: int):
        super().__init__(f"non-finite loss component {component!r} at step {step}")
        self.component = component
        self.step = step


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.4
    learning_rate: float = 2e-4
    epochs: int = 500
    batch_size: int = 2
    dropout_keep_prob: float = 0.5
    loss_switches: dict[str, bool] = field(default_factory=lambda: dict.fromkeys(LOSS_SWITCHES, True))
    seed: int = 0
    patch_side: int = 112
    max_steps: int | None = None
    grad_clip: float | None = 5.0
    cosine_decay: bool = False
    checkpoint_every: int = 50
    temperature: float = 10.0
    learn_temperature: bool = True
    include_self_pairs: bool = True

    def __post_init__(self):
        switches = dict.fromkeys(LOSS_SWITCHES, True)
        unknown = set(self.loss_switches) - set(LOSS_SWITCHES)
        if unknown:
            raise ValueError(f"unknown loss switch(es): {sorted(unknown)}")
        switches.update({k: bool(v) for k, v in self.loss_switches.items()})
        self.loss_switches = switches
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.dropout_keep_prob <= 1:
            raise ValueError("dropout_keep_prob must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    def ablated(self, *terms: str) -> "TrainConfig":
        sw = dict(self.loss_switches)
        for t in terms:
            if t not in sw:
                raise ValueError(f"unknown loss switch {t!r}")
            sw[t] = False
        return TrainConfig(**{**asdict(self), "loss_switches": sw})

    @property
    def contrastive(self) -> L.ContrastiveConfig:
        return L.ContrastiveConfig(temperature=self.temperature, include_self_pairs=self.include_self_pairs)


# --------------------------------------------------------------------- modality dropout

def sample_availability(m: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(p) per modality, redrawn until at least one is kept."""
    if not 0 < p <= 1:
        raise ValueError("keep probability must be in (0, 1]")
    while True:
        mask = rng.random(m) < p
        if mask.any():
            return mask


def sample_availability_batch(m: int, p: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` masks from the same conditioned distribution, vectorised."""
    if not 0 < p <= 1:
        raise ValueError("keep probability must be in (0, 1]")
    out = np.empty((n, m), dtype=bool)
    filled = 0
    while filled < n:
        draw = rng.random((max(n - filled, 16), m)) < p
        draw = draw[draw.any(1)][: n - filled]
        out[filled:filled + len(draw)] = draw
        filled += len(draw)
    return out


def mask_probability(mask, p: float) -> float:
    """Probability of ``mask`` under the non-empty-conditioned Bernoulli product."""
    mask = np.asarray(mask, bool)
    k, m = mask.sum(), mask.size
    if k == 0:
        return 0.0
    return p**k * (1 - p) ** (m - k) / (1 - (1 - p) ** m)


# --------------------------------------------------------------------- one step

def compute_losses(model: DCSeg, x: torch.Tensor, y: torch.Tensor, masks: torch.Tensor,
                   cfg: TrainConfig) -> dict[str, torch.Tensor]:
    """Forward pass plus every loss term; disabled terms are exact zeros."""
    sw = cfg.loss_switches
    out = model(x, masks, need_rec=sw["rec"], need_sep=sw["reg"])
    zero = x.new_zeros(())
    parts = {"seg": L.segmentation_loss(out["fused_logits"], y)}
    if sw["reg"]:
        sep = out["sep_logits"]
        parts["reg"] = sum(L.segmentation_loss(sep[:, j], y) for j in range(sep.shape[1]))
    else:
        parts["reg"] = zero
    t = model.temperature
    ccfg = cfg.contrastive
    parts["ana"] = L.anatomical_contrastive_loss(L.PairBatch.from_grid(out["anat"]), ccfg, t) \
        if sw["ana"] else zero
    parts["mod"] = L.modality_contrastive_loss(L.PairBatch.from_grid(out["mod"]), ccfg, t) \
        if sw["mod"] else zero
    parts["rec"] = L.reconstruction_loss(out["recon"], x) if sw["rec"] else zero
    parts["disentangle"] = L.disentangle_loss(parts["ana"], parts["mod"], parts["rec"])
    parts["total"] = L.total_loss(parts["seg"], parts["reg"], parts["disentangle"], cfg.alpha)
    return parts


def train_step(model: DCSeg, optimizer: torch.optim.Optimizer, x: torch.Tensor, y: torch.Tensor,
               masks: torch.Tensor, cfg: TrainConfig, step: int = 0) -> dict[str, float]:
    model.train()
    parts = compute_losses(model, x, y, masks, cfg)
    for name in ("seg", "reg", "ana", "mod", "rec", "total"):
        if not torch.isfinite(parts[name]):
            raise TrainingDiverged(name, step)
    optimizer.zero_grad(set_to_none=True)
    parts["total"].backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return {k: float(v.detach()) for k, v in parts.items()} | {"t_value": float(model.temperature.detach())}


# --------------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: DCSeg, optimizer=None, *, step=0, epoch=0, rng_state=None,
                    train_config: TrainConfig | None = None):
    path = Path(path)
    payload = {
        "magic": CKPT_MAGIC,
        "model_config": model.cfg.to_dict(),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "log_t": float(model.log_t.detach()),
        "learn_temperature": isinstance(model.log_t, torch.nn.Parameter),
        "step": step,
        "epoch": epoch,
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if rng_state is not None:
        payload["rng_state"] = rng_state
    if train_config is not None:
        payload["train_config"] = asdict(train_config)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for damaged archives
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a {CKPT_MAGIC} checkpoint")
    return payload


def load_model(path, device="cpu") -> tuple[DCSeg, dict]:
    payload = read_checkpoint(path)
    cfg = ModelConfig(**payload["model_config"])
    model = DCSeg(cfg, temperature=math.exp(payload["log_t"]),
                  learn_temperature=payload.get("learn_temperature", True))
    model.load_state_dict(payload["params"])
    return model.to(device).eval(), payload


# --------------------------------------------------------------------- loop

def _lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if not cfg.cosine_decay or total_steps <= 0:
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1 + math.cos(math.pi * min(step / total_steps, 1.0)))


def make_batch(subjects: list[MultimodalVolume], aug: AugmentationConfig, rng, device="cpu"):
    crops = [augment(s, aug, rng) for s in subjects]
    x = torch.from_numpy(np.stack([c.volumes for c in crops])).to(device)
    y = torch.from_numpy(np.stack([c.label for c in crops])).to(device)
    return x, y


def _write_metrics(path: Path, rows, keep_upto: int | None = None):
    """Append rows; when resuming, first drop rows past the checkpoint step."""
    if keep_upto is not None and path.exists():
        with path.open() as f:
            old = [r for r in csv.DictReader(f) if int(r["step"]) <= keep_upto]
        with path.open("w", newline="") as f:
            w = csv.DictWriter(f, METRIC_FIELDS)
            w.writeheader()
            w.writerows(old)
    new_file = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.DictWriter(f, METRIC_FIELDS)
        if new_file:
            w.writeheader()
        w.writerows(rows)


def build_model(model_cfg: ModelConfig, cfg: TrainConfig) -> DCSeg:
    torch.manual_seed(cfg.seed)
    return DCSeg(model_cfg, temperature=cfg.temperature, learn_temperature=cfg.learn_temperature)


def run_training(dataset: list[MultimodalVolume], model_cfg: ModelConfig, cfg: TrainConfig,
                 out_dir, aug: AugmentationConfig | None = None, resume: bool = True,
                 device: str = "cpu", progress=None) -> dict:
    """Train on ``dataset`` and write checkpoints plus ``metrics.csv`` to ``out_dir``.

    Resumes from ``out_dir/last.ckpt`` when present. Returns a summary dict with
    the final checkpoint path and the number of steps taken.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aug = aug or AugmentationConfig(crop_size=cfg.patch_side, seed=cfg.seed)
    if aug.crop_size != model_cfg.patch_side:
        raise ValueError(f"crop size {aug.crop_size} != model patch_side {model_cfg.patch_side}")
    torch.use_deterministic_algorithms(True)

    model = build_model(model_cfg, cfg).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    step, epoch = 0, 0
    last = out / "last.ckpt"
    metrics_path = out / "metrics.csv"
    keep_upto = None
    if resume and last.exists():
        payload = read_checkpoint(last)
        model.load_state_dict(payload["params"])
        optimizer.load_state_dict(payload["optimizer"])
        rng.bit_generator.state = payload["rng_state"]
        step, epoch = payload["step"], payload["epoch"]
        keep_upto = step
        log.info("resumed from %s at epoch %d step %d", last, epoch, step)
    elif metrics_path.exists():
        metrics_path.unlink()

    def checkpoint(*names):
        for name in names:
            save_checkpoint(out / name, model, optimizer, step=step, epoch=epoch,
                            rng_state=rng.bit_generator.state, train_config=cfg)

    if step == 0 and epoch == 0:
        checkpoint("last.ckpt")
    _write_metrics(metrics_path, [], keep_upto)

    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    m = model_cfg.modality_count

    while epoch < cfg.epochs and step < total_steps:
        order = rng.permutation(len(dataset))
        rows = []
        for b in range(0, len(order), cfg.batch_size):
            if step >= total_steps:
                break
            subjects = [dataset[i] for i in order[b:b + cfg.batch_size]]
            x, y = make_batch(subjects, aug, rng, device)
            masks = torch.from_numpy(np.stack([sample_availability(m, cfg.dropout_keep_prob, rng)
                                               for _ in subjects])).to(device)
            for group in optimizer.param_groups:
                group["lr"] = _lr_at(cfg, step, total_steps)
            parts = train_step(model, optimizer, x, y, masks, cfg, step)
            step += 1
            rows.append({"step": step, "epoch": epoch + 1, "l_seg": parts["seg"], "l_reg": parts["reg"],
                         "l_ana": parts["ana"], "l_mod": parts["mod"], "l_rec": parts["rec"],
                         "total": parts["total"], "t_value": parts["t_value"]})
            if progress is not None:
                progress(step, parts)
        epoch += 1
        _write_metrics(metrics_path, rows)
        if epoch % cfg.checkpoint_every == 0:
            checkpoint(f"epoch_{epoch:04d}.ckpt")
        checkpoint("last.ckpt")

    checkpoint("final.ckpt")
    return {"checkpoint": out / "final.ckpt", "metrics": metrics_path, "steps": step, "epochs": epoch}
