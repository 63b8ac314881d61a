"""Frozen latent codec: a small deterministic autoencoder standing in for a pretrained VAE."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .data import DatasetManifest, load_image, load_mask
from .errors import NonFiniteLoss, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShapeSpec:
    h: int
    w: int
    c: int = 3
    s: int = 4
    c_latent: int = 16

    def __post_init__(self):
        if self.s < 1 or self.s & (self.s - 1):
            raise ShapeError(f"downsampling factor {self.s} is not a power of 2")
        if self.h % self.s or self.w % self.s:
            raise ShapeError(f"{self.h}x{self.w} is not divisible by s={self.s}")
        if self.c_latent < 4 * self.c:
            raise ShapeError(f"latent channels {self.c_latent} < 4*{self.c}")

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.h // self.s, self.w // self.s


class Blur(nn.Module):
    """Fixed separable [1, 2, 1]/4 low-pass; zero response at the Nyquist frequency."""

    def __init__(self, channels: int):
        super().__init__()
        k = torch.tensor([1.0, 2.0, 1.0])
        k2 = torch.outer(k, k) / 16.0
        self.register_buffer("kernel", k2.expand(channels, 1, 3, 3).clone(), persistent=False)
        self.channels = channels

    def forward(self, x):
        x = F.pad(x, (1, 1, 1, 1), mode="reflect")
        return F.conv2d(x, self.kernel.to(x.dtype), groups=self.channels)


class _Refine(nn.Module):
    """``h + conv(silu(h))``; the skip keeps absolute intensity flowing through the stack."""

    def __init__(self, width: int):
        super().__init__()
        self.conv = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, h):
        return h + self.conv(F.silu(h))


class Encoder(nn.Module):
    """log2(s) blocks of blur -> stride-2 conv -> residual refine, then a 1×1 projection to c'."""

    def __init__(self, s: int = 4, c_latent: int = 16, widths=(16, 32), in_ch: int = 3):
        super().__init__()
        n = int(math.log2(s))
        if len(widths) != n:
            raise ValueError(f"need {n} widths for s={s}, got {widths}")
        layers = []
        cin = in_ch
        for cout in widths:
            layers += [Blur(cin), nn.Conv2d(cin, cout, 3, stride=2, padding=1), _Refine(cout)]
            cin = cout
        layers.append(nn.Conv2d(cin, c_latent, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, s: int = 4, c_latent: int = 16, widths=(16, 32), out_ch: int = 3):
        super().__init__()
        rev = list(widths)[::-1]
        layers = [nn.Conv2d(c_latent, rev[0], 1)]
        cin = rev[0]
        for cout in rev[1:] + [rev[-1]]:
            layers += [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1), _Refine(cout)]
            cin = cout
        layers += [nn.Conv2d(cin, out_ch, 3, padding=1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class LatentCodec(nn.Module):
    """Encoder/decoder pair. Encoding is deterministic (posterior mean only)."""

    def __init__(self, s: int = 4, c_latent: int = 16, widths=(16, 32)):
        super().__init__()
        if c_latent < 12:
            raise ShapeError("latent channels must be at least 4x the 3 image channels")
        self.s = s
        self.c_latent = c_latent
        self.widths = tuple(widths)
        self.encoder = Encoder(s, c_latent, widths)
        self.decoder = Decoder(s, c_latent, widths)
        self.frozen = False

    def freeze(self) -> "LatentCodec":
        self.frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def check_input(self, x: torch.Tensor) -> None:
        if x.shape[-1] % self.s or x.shape[-2] % self.s:
            raise ShapeError(f"spatial dims {tuple(x.shape[-2:])} not divisible by s={self.s}")

    def encode_t(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.encoder(x)

    def decode_t(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-3] != self.c_latent:
            raise ShapeError(f"latent has {z.shape[-3]} channels, codec expects {self.c_latent}")
        return self.decoder(z)

    def arch(self) -> dict:
        return {"s": self.s, "c_latent": self.c_latent, "widths": list(self.widths)}

    def content_hash(self) -> str:
        return ckpt.tensors_hash(self.state_dict())

    def save(self, directory, meta: dict | None = None) -> Path:
        return ckpt.save_checkpoint(directory, self.state_dict(),
                                    {"kind": "codec", "arch": self.arch(), "frozen": self.frozen, **(meta or {})})

    @classmethod
    def load(cls, directory) -> "LatentCodec":
        tensors, manifest = ckpt.load_checkpoint(directory)
        arch = manifest["arch"]
        codec = cls(arch["s"], arch["c_latent"], tuple(arch["widths"]))
        codec.load_state_dict(tensors)
        return codec.freeze()


# ------------------------------------------------------------- array-level API

def _hwc_to_batch(x: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype).permute(2, 0, 1)[None]


def _dtype(codec: LatentCodec):
    return next(codec.parameters()).dtype


@torch.no_grad()
def encode(image: np.ndarray, codec: LatentCodec) -> np.ndarray:
    """``(H, W, 3)`` image -> ``(H/s, W/s, c')`` latent."""
    if image.ndim != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got shape {image.shape}")
    z = codec.encode_t(_hwc_to_batch(image, _dtype(codec)))
    return z[0].permute(1, 2, 0).double().numpy()


@torch.no_grad()
def decode(latent: np.ndarray, codec: LatentCodec) -> np.ndarray:
    """``(h', w', c')`` latent -> ``(h'·s, w'·s, 3)`` map in [0, 1]."""
    if latent.ndim != 3:
        raise ShapeError(f"expected an (h', w', c') latent, got shape {latent.shape}")
    x = codec.decode_t(_hwc_to_batch(latent, _dtype(codec)))
    return x[0].permute(1, 2, 0).double().numpy()


def mask_to_image(mask) -> np.ndarray:
    return np.repeat(np.asarray(mask, dtype=np.float64)[..., None], 3, axis=2)


def encode_mask(mask: np.ndarray, codec: LatentCodec) -> np.ndarray:
    if mask.ndim != 2:
        raise ShapeError(f"expected an (H, W) mask, got shape {mask.shape}")
    return encode(mask_to_image(mask), codec)


# --------------------------------------------------------------- pretraining

@dataclass
class CodecConfig:
    s: int = 4
    c_latent: int = 16
    widths: tuple = (16, 32)
    epochs: int = 12
    batch_size: int = 16
    learning_rate: float = 2e-3
    seed: int = 0


@dataclass
class PretrainResult:
    codec: LatentCodec
    curve: list = field(default_factory=list)


def pretrain_codec(manifest: DatasetManifest, config: CodecConfig | None = None) -> PretrainResult:
    """Fit the codec on pristine images plus replicated masks, then freeze it.

    Images come from ``pristine`` records and masks from every other record, so
    mask latents decode back to sharp masks. The returned weights are those of
    the epoch with the lowest mean training loss.
    """
    config = config or CodecConfig()
    torch.manual_seed(config.seed)
    codec = LatentCodec(config.s, config.c_latent, config.widths)
    samples = []
    for rec in manifest.records:
        if rec.forgery_kind == "pristine":
            samples.append(load_image(manifest.resolve(rec.image_path)))
        else:
            samples.append(mask_to_image(load_mask(manifest.resolve(rec.mask_path))))
    if not samples:
        raise ValueError("pretrain manifest is empty")
    data = torch.from_numpy(np.stack(samples)).float().permute(0, 3, 1, 2).contiguous()

    opt = torch.optim.Adam(codec.parameters(), lr=config.learning_rate)
    total_steps = config.epochs * math.ceil(len(data) / config.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=config.learning_rate, total_steps=total_steps,
                                                pct_start=0.1)
    gen = torch.Generator().manual_seed(config.seed)
    curve = []
    best, best_state = math.inf, None
    for epoch in range(config.epochs):
        codec.train()
        order = torch.randperm(len(data), generator=gen)
        running = 0.0
        for i in range(0, len(data), config.batch_size):
            batch = data[order[i:i + config.batch_size]]
            loss = F.mse_loss(codec.decode_t(codec.encode_t(batch)), batch)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"codec pretraining loss became {loss.item()} at epoch {epoch}",
                                    order[i:i + config.batch_size].tolist())
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item() * len(batch)
        mean = running / len(data)
        if mean < best:
            best, best_state = mean, copy.deepcopy(codec.state_dict())
        curve.append({"epoch": epoch, "loss": mean, "best": best})
        log.info("codec epoch %d loss %.5f", epoch, mean)
    codec.load_state_dict(best_state)
    return PretrainResult(codec=codec.freeze(), curve=curve)


def random_codec(config: CodecConfig | None = None) -> LatentCodec:
    """Untrained frozen codec (the ``no_codec_pretrain`` ablation)."""
    config = config or CodecConfig()
    torch.manual_seed(config.seed)
    return LatentCodec(config.s, config.c_latent, config.widths).freeze()
