"""Per-modality encoders, availability-masked fusion and the four decoders.

Layout of one forward pass for a batch ``x`` of shape ``(N, M, s, s, s)``:

    a[:, j] = enc_ana[j](x[:, j])          (N, C, d, d, d)
    m[:, j] = enc_mod[j](x[:, j])          (N, C_mod)
    z       = fusion(a, mask)               (N, C, d, d, d)
    recon_j = dec_rec[j](z, m[:, j])        (N, 1, s, s, s)
    sep_j   = dec_sep(a[:, j])              (N, K, s, s, s)   shared weights
    fused   = dec_fuse(z)                   (N, K, s, s, s)

There are no encoder-to-decoder skips: everything the segmentation heads see
passes through the anatomical bottleneck.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    modality_count: int = 4
    class_count: int = 2
    anat_channels: int = 8
    modality_dim: int = 8
    encoder_widths: list[int] = field(default_factory=lambda: [8, 16, 32])
    patch_side: int = 32
    downsample_factor: int = 4
    modality_names: list[str] = field(default_factory=lambda: ["flair", "t1", "t1c", "t2"])
    norm: str = "instance"

    def __post_init__(self):
        self.encoder_widths = list(self.encoder_widths)
        self.modality_names = list(self.modality_names)
        if self.modality_count < 1:
            raise ValueError("modality_count must be >= 1")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.modality_dim < 1 or self.anat_channels < 1:
            raise ValueError("modality_dim and anat_channels must be >= 1")
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError("downsample_factor must be a power of two")
        if self.patch_side % f:
            raise ValueError(f"patch_side {self.patch_side} not divisible by downsample_factor {f}")
        if len(self.encoder_widths) != self.levels + 1:
            raise ValueError(f"encoder_widths needs {self.levels + 1} entries for downsample_factor {f}")
        if len(self.modality_names) != self.modality_count:
            raise ValueError("modality_names must have modality_count entries")
        if self.norm not in ("instance", "none"):
            raise ValueError(f"norm must be 'instance' or 'none', got {self.norm!r}")

    @property
    def levels(self) -> int:
        return int(math.log2(self.downsample_factor))

    @property
    def latent_side(self) -> int:
        return self.patch_side // self.downsample_factor

    def to_dict(self) -> dict:
        return asdict(self)


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv3d(cin, cout, k, stride=stride, padding=k // 2)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, norm="instance"):
        super().__init__()
        self.conv = _conv(cin, cout, stride=stride)
        self.norm = nn.InstanceNorm3d(cout, affine=True) if norm == "instance" else nn.Identity()

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class AnatomicalEncoder(nn.Module):
    def __init__(self, widths, out_channels, norm="instance"):
        super().__init__()
        self.stem = ConvBlock(1, widths[0], norm=norm)
        self.downs = nn.ModuleList()
        for cin, cout in zip(widths[:-1], widths[1:]):
            self.downs.append(nn.Sequential(ConvBlock(cin, cout, stride=2, norm=norm),
                                            ConvBlock(cout, cout, norm=norm)))
        self.head = nn.Conv3d(widths[-1], out_channels, 1)

    def forward(self, x):
        h = self.stem(x)
        for down in self.downs:
            h = down(h)
        return self.head(h)


class ModalityEncoder(nn.Module):
    """Strided convs, global pooling, 2-layer head, tanh output."""

    def __init__(self, widths, out_dim):
        super().__init__()
        w0, w1 = widths[0], widths[min(1, len(widths) - 1)]
        self.features = nn.Sequential(
            nn.Conv3d(1, w0, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv3d(w0, w1, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.head = nn.Sequential(nn.Linear(w1, w1), nn.LeakyReLU(0.2), nn.Linear(w1, out_dim))

    def reset_output_bias(self):
        # a zero input must still map to a usable (nonzero) direction
        nn.init.normal_(self.head[-1].bias, std=0.1)

    def forward(self, x):
        h = self.features(x).mean(dim=(2, 3, 4))
        return torch.tanh(self.head(h))


class MaskedFusion(nn.Module):
    """Softmax-gated sum over available modalities, then a channel projection.

    Masked modalities are zeroed before anything reads them and their gate
    scores are set to -inf, so their values can never reach the output.
    """

    def __init__(self, modality_count, channels):
        super().__init__()
        self.gate = nn.Conv3d(modality_count * channels, modality_count, 1)
        self.proj = nn.Conv3d(channels, channels, 1)

    def aggregate(self, anat, mask):
        """``anat`` (N, M, C, d, d, d), ``mask`` (N, M) bool -> (N, C, d, d, d) before projection."""
        if mask.ndim == 1:
            mask = mask[None].expand(anat.shape[0], -1)
        mask = mask.to(torch.bool)
        if not mask.any(dim=1).all():
            raise ValueError("no available modalities to fuse")
        keep = mask[:, :, None, None, None, None]
        a = torch.where(keep, anat, torch.zeros((), dtype=anat.dtype, device=anat.device))
        scores = self.gate(a.flatten(1, 2))                        # (N, M, d, d, d)
        scores = scores.masked_fill(~mask[:, :, None, None, None], float("-inf"))
        w = torch.softmax(scores, dim=1)
        return (w[:, :, None] * a).sum(1)

    def forward(self, anat, mask):
        return self.proj(self.aggregate(anat, mask))


class FiLM(nn.Module):
    def __init__(self, cond_dim, channels):
        super().__init__()
        self.scale = nn.Linear(cond_dim, channels)
        self.shift = nn.Linear(cond_dim, channels)
        self.reset_parameters()

    def reset_parameters(self):
        # identity modulation at init
        nn.init.zeros_(self.scale.weight)
        nn.init.ones_(self.scale.bias)
        nn.init.zeros_(self.shift.weight)
        nn.init.zeros_(self.shift.bias)

    def forward(self, h, cond):
        s = self.scale(cond)[:, :, None, None, None]
        b = self.shift(cond)[:, :, None, None, None]
        return h * s + b


class Decoder(nn.Module):
    """Upsampling path from the latent map to full resolution.

    With ``cond_dim`` set, every level is modulated by a FiLM layer driven by
    the conditioning vector.
    """

    def __init__(self, in_channels, widths, out_channels, cond_dim=None, norm="instance"):
        super().__init__()
        rev = list(reversed(widths))
        self.inp = ConvBlock(in_channels, rev[0], norm=norm)
        self.ups = nn.ModuleList(ConvBlock(cin, cout, norm=norm) for cin, cout in zip(rev[:-1], rev[1:]))
        self.out = nn.Conv3d(rev[-1], out_channels, 1)
        self.films = None
        if cond_dim is not None:
            self.films = nn.ModuleList(FiLM(cond_dim, w) for w in rev)

    def forward(self, z, cond=None):
        h = self.inp(z)
        if self.films is not None:
            h = self.films[0](h, cond)
        for i, up in enumerate(self.ups):
            h = F.interpolate(h, scale_factor=2, mode="trilinear", align_corners=False)
            h = up(h)
            if self.films is not None:
                h = self.films[i + 1](h, cond)
        return self.out(h)


def _init_weights(module):
    if isinstance(module, (nn.Conv3d, nn.Linear)):
        nn.init.kaiming_normal_(module.weight, a=0.2, nonlinearity="leaky_relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class DCSeg(nn.Module):
    def __init__(self, cfg: ModelConfig, temperature: float = 10.0, learn_temperature: bool = True):
        super().__init__()
        self.cfg = cfg
        w, c = cfg.encoder_widths, cfg.anat_channels
        nm = cfg.norm
        self.enc_ana = nn.ModuleList(AnatomicalEncoder(w, c, nm) for _ in range(cfg.modality_count))
        self.enc_mod = nn.ModuleList(ModalityEncoder(w, cfg.modality_dim) for _ in range(cfg.modality_count))
        self.fusion = MaskedFusion(cfg.modality_count, c)
        self.dec_rec = nn.ModuleList(Decoder(c, w, 1, cond_dim=cfg.modality_dim, norm=nm)
                                     for _ in range(cfg.modality_count))
        self.dec_sep = Decoder(c, w, cfg.class_count, norm=nm)
        self.dec_fuse = Decoder(c, w, cfg.class_count, norm=nm)
        self.apply(_init_weights)
        for mod in self.modules():
            if isinstance(mod, FiLM):
                mod.reset_parameters()
            elif isinstance(mod, ModalityEncoder):
                mod.reset_output_bias()
        log_t = torch.tensor(math.log(temperature))
        if learn_temperature:
            self.log_t = nn.Parameter(log_t)
        else:
            self.register_buffer("log_t", log_t)

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_t.exp()

    def _check_volume(self, x):
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2] % self.cfg.downsample_factor \
                or len(set(x.shape[2:])) != 1:
            raise ValueError(f"expected (N, 1, s, s, s) with s divisible by "
                             f"{self.cfg.downsample_factor}, got {tuple(x.shape)}")

    def _check_modality(self, j):
        if not 0 <= j < self.cfg.modality_count:
            raise ValueError(f"modality index {j} out of range")

    def encode_anatomical(self, x, j):
        self._check_volume(x)
        self._check_modality(j)
        return self.enc_ana[j](x)

    def encode_modality(self, x, j):
        self._check_volume(x)
        self._check_modality(j)
        m = self.enc_mod[j](x)
        if (m.norm(dim=1) < 1e-12).any():
            raise FloatingPointError("modality encoder produced a zero vector")
        return m

    def fuse(self, anat, mask):
        return self.fusion(anat, mask)

    def decode_reconstruction(self, z, m, j):
        self._check_modality(j)
        return self.dec_rec[j](z, m)

    def decode_separate(self, a):
        return self.dec_sep(a)

    def decode_fused(self, z):
        return self.dec_fuse(z)

    def encode_all(self, x):
        """(N, M, s, s, s) -> anatomical (N, M, C, d, d, d), modality (N, M, C_mod)."""
        if x.ndim != 5 or x.shape[1] != self.cfg.modality_count:
            raise ValueError(f"expected (N, {self.cfg.modality_count}, s, s, s), got {tuple(x.shape)}")
        anat = torch.stack([self.encode_anatomical(x[:, j:j + 1], j) for j in range(x.shape[1])], 1)
        mod = torch.stack([self.encode_modality(x[:, j:j + 1], j) for j in range(x.shape[1])], 1)
        return anat, mod

    def forward(self, x, mask, *, need_rec=True, need_sep=True):
        """Full training graph; returns every intermediate the losses need."""
        anat, mod = self.encode_all(x)
        z = self.fuse(anat, mask)
        out = {"anat": anat, "mod": mod, "z": z, "fused_logits": self.decode_fused(z)}
        m = self.cfg.modality_count
        if need_rec:
            out["recon"] = torch.cat([self.decode_reconstruction(z, mod[:, j], j) for j in range(m)], 1)
        if need_sep:
            n = x.shape[0]
            sep = self.decode_separate(anat.flatten(0, 1))
            out["sep_logits"] = sep.reshape(n, m, *sep.shape[1:])
        return out

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {}
        for j in range(self.cfg.modality_count):
            groups[f"enc_ana.{j}"] = list(self.enc_ana[j].parameters())
            groups[f"enc_mod.{j}"] = list(self.enc_mod[j].parameters())
            groups[f"dec_rec.{j}"] = list(self.dec_rec[j].parameters())
        groups["fusion"] = list(self.fusion.parameters())
        groups["dec_sep"] = list(self.dec_sep.parameters())
        groups["dec_fuse"] = list(self.dec_fuse.parameters())
        return groups
