"""End-to-end training, inference and evaluation of the mapping networks over a frozen codec."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .codec import CodecConfig, LatentCodec, random_codec
from .data import DatasetManifest, load_pair
from .errors import CodecHashMismatch, EmptyInput, NonFiniteLoss, SchemaError, ShapeError
from .mapping import MappingConfig, MappingNets
from .metrics import EvalReport, binarize, metric_record
from .objective import batch_dice_loss, latent_matching_loss
from .srm import residuals_torch

log = logging.getLogger(__name__)

ABLATIONS = ("no_srm_flmm", "no_vae_lmm", "no_lmm", "no_codec_pretrain")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    warmup_epochs: int = 5
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    ablation: list = field(default_factory=list)
    codec_checkpoint: str | None = None
    weight_decay: float = 0.01
    image_size: int = 64
    mapping: dict = field(default_factory=dict)
    # only used for the random codec of ``no_codec_pretrain``
    codec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise SchemaError("learning_rate must be > 0")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise SchemaError("warmup_epochs must lie in [0, epochs]")
        if self.batch_size < 1:
            raise SchemaError("batch_size must be >= 1")
        unknown = set(self.ablation) - set(ABLATIONS)
        if unknown:
            raise SchemaError(f"unknown ablation(s) {sorted(unknown)}; choose from {ABLATIONS}")
        self.ablation = sorted(set(self.ablation))
        bad = set(self.mapping) - {f.name for f in fields(MappingConfig)}
        if bad:
            raise SchemaError(f"unknown mapping option(s) {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise SchemaError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return ckpt.config_hash(self.to_dict())


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Learning rate for 0-based update ``step``: linear warm-up, then constant.

    During warm-up the rate is ``lr · (step + 1) / warmup_steps``, reaching
    exactly ``lr`` on the last warm-up update.
    """
    warmup_steps = config.warmup_epochs * steps_per_epoch
    if step + 1 >= warmup_steps:
        return config.learning_rate
    return config.learning_rate * (step + 1) / warmup_steps


@dataclass
class ModelCheckpoint:
    nets: MappingNets
    codec: LatentCodec
    config: TrainConfig
    codec_hash: str
    epoch: int = 0
    history: list = field(default_factory=list)

    @property
    def ablation(self) -> frozenset:
        return frozenset(self.config.ablation)

    def save(self, directory) -> Path:
        meta = {
            "kind": "mapping",
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "codec_hash": self.codec_hash,
            "epoch": self.epoch,
            "history": self.history,
        }
        return ckpt.save_checkpoint(directory, self.nets.state_dict(), meta)

    @classmethod
    def load(cls, directory, codec: LatentCodec | None = None) -> "ModelCheckpoint":
        tensors, meta = ckpt.load_checkpoint(directory)
        if meta.get("kind") != "mapping":
            raise SchemaError(f"{directory} is not a mapping-network checkpoint")
        config = TrainConfig.from_dict(meta["config"])
        codec = codec if codec is not None else resolve_codec(config)
        if codec.content_hash() != meta["codec_hash"]:
            raise CodecHashMismatch(f"codec hash {codec.content_hash()[:12]} != recorded {meta['codec_hash'][:12]}")
        nets = MappingNets(mapping_config(config, codec))
        nets.load_state_dict(tensors)
        nets.eval()
        return cls(nets=nets, codec=codec, config=config, codec_hash=meta["codec_hash"],
                   epoch=meta["epoch"], history=meta["history"])


def resolve_codec(config: TrainConfig) -> LatentCodec:
    if "no_codec_pretrain" in config.ablation:
        return random_codec(CodecConfig(**{**config.codec, "seed": config.seed}))
    if not config.codec_checkpoint:
        raise SchemaError("codec_checkpoint is required unless ablation no_codec_pretrain is set")
    return LatentCodec.load(config.codec_checkpoint)


def mapping_config(config: TrainConfig, codec: LatentCodec) -> MappingConfig:
    if config.image_size % codec.s:
        raise ShapeError(f"image_size {config.image_size} not divisible by s={codec.s}")
    return MappingConfig(**{"c_latent": codec.c_latent, "patch": codec.s,
                            "grid": config.image_size // codec.s, **config.mapping})


# ----------------------------------------------------------------- plumbing

def _to_batch(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)).float().permute(0, 3, 1, 2).contiguous()


def load_arrays(manifest: DatasetManifest):
    images, masks = [], []
    for rec in manifest.records:
        image, mask = load_pair(manifest, rec)
        images.append(image)
        masks.append(mask)
    return images, masks


@torch.no_grad()
def _precompute(codec: LatentCodec, x: torch.Tensor, m: torch.Tensor, chunk: int = 64):
    z_i, z_m, res = [], [], []
    for i in range(0, len(x), chunk):
        xb, mb = x[i:i + chunk], m[i:i + chunk]
        z_i.append(codec.encode_t(xb))
        z_m.append(codec.encode_t(mb[:, None].expand(-1, 3, -1, -1)))
        res.append(residuals_torch(xb))
    return torch.cat(z_i), torch.cat(z_m), torch.cat(res)


def predict_t(nets: MappingNets, codec: LatentCodec, z_i, residual, ablation=frozenset()):
    """Return ``(ẑ_m, m̂)`` where ``m̂`` is the channel-mean of the decoded fused latent."""
    z_hat = nets(z_i, residual, ablation)
    return z_hat, codec.decode_t(z_hat).mean(dim=1)


def _param_groups(nets: MappingNets, weight_decay: float):
    decay, no_decay = [], []
    for name, p in nets.named_parameters():
        (decay if p.dim() >= 2 and not name.endswith(".pos") else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


# ------------------------------------------------------------------ training

def train(config: TrainConfig, manifest: DatasetManifest, codec: LatentCodec | None = None,
          log_path=None) -> ModelCheckpoint:
    """Fit LMM/FLMM/fusion against ``L_lm + L_loc`` with the codec frozen.

    ``log_path`` receives one JSON line per update:
    ``{epoch, step, lm, loc, total, lr}``.
    """
    if len(manifest) == 0:
        raise EmptyInput("training manifest is empty")
    torch.use_deterministic_algorithms(True)
    codec = codec if codec is not None else resolve_codec(config)
    codec.freeze()
    codec_hash = codec.content_hash()
    ablation = frozenset(config.ablation)

    images, masks = load_arrays(manifest)
    if images[0].shape[0] != config.image_size:
        raise ShapeError(f"images are {images[0].shape[:2]}, config.image_size={config.image_size}")
    x = _to_batch(images)
    m = torch.from_numpy(np.stack(masks)).float()
    z_i, z_m, res = _precompute(codec, x, m)

    torch.manual_seed(config.seed)
    nets = MappingNets(mapping_config(config, codec))
    nets.train()
    opt = torch.optim.AdamW(_param_groups(nets, config.weight_decay), lr=config.learning_rate)
    n = len(x)
    steps_per_epoch = math.ceil(n / config.batch_size)
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    log_fh = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(config.epochs):
            order = torch.randperm(n, generator=gen)
            sums = np.zeros(3)
            for b in range(steps_per_epoch):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                lr = lr_at(step, config, steps_per_epoch)
                for g in opt.param_groups:
                    g["lr"] = lr
                z_hat, m_hat = predict_t(nets, codec, z_i[idx], res[idx], ablation)
                lm = latent_matching_loss(z_m[idx], z_hat)
                loc = batch_dice_loss(m[idx], m_hat)
                total = lm + loc
                if not torch.isfinite(total):
                    ids = [manifest.records[i].image_path for i in idx.tolist()]
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch} step {step}: {ids}", ids)
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                row = (lm.item(), loc.item(), total.item())
                sums += np.array(row) * len(idx)
                if log_fh:
                    log_fh.write(json.dumps({"epoch": epoch, "step": step, "lm": row[0], "loc": row[1],
                                             "total": row[2], "lr": lr}) + "\n")
                step += 1
            means = sums / n
            history.append({"epoch": epoch, "lm": means[0], "loc": means[1], "total": means[2]})
            log.info("epoch %d lm %.4f loc %.4f total %.4f", epoch, *means)
    finally:
        if log_fh:
            log_fh.close()

    if codec.content_hash() != codec_hash:
        raise CodecHashMismatch("codec weights changed during training")
    nets.eval()
    return ModelCheckpoint(nets=nets, codec=codec, config=config, codec_hash=codec_hash,
                           epoch=config.epochs, history=history)


# ------------------------------------------------------------ inference/eval

@torch.no_grad()
def infer_batch(checkpoint: ModelCheckpoint, images: Sequence[np.ndarray]) -> np.ndarray:
    x = _to_batch(images)
    checkpoint.codec.check_input(x)
    z_i = checkpoint.codec.encode_t(x)
    _, m_hat = predict_t(checkpoint.nets, checkpoint.codec, z_i, residuals_torch(x), checkpoint.ablation)
    return m_hat.double().numpy()


def infer(checkpoint: ModelCheckpoint, image: np.ndarray) -> np.ndarray:
    """Probability map ``(H, W)`` in [0, 1] for one ``(H, W, 3)`` image."""
    return infer_batch(checkpoint, [image])[0]


def evaluate(checkpoint: ModelCheckpoint, manifest: DatasetManifest, batch: int = 32) -> EvalReport:
    if len(manifest) == 0:
        raise EmptyInput("evaluation manifest is empty")
    images, masks = load_arrays(manifest)
    records = []
    for i in range(0, len(images), batch):
        probs = infer_batch(checkpoint, images[i:i + batch])
        for rec, mask, prob in zip(manifest.records[i:i + batch], masks[i:i + batch], probs):
            records.append(metric_record(mask, binarize(prob), image_id=rec.image_path))
    return EvalReport.from_records(records, config_hash=checkpoint.config.hash())


def run_ablation(config_base: TrainConfig, manifest_train: DatasetManifest, manifest_test: DatasetManifest,
                 variants: Iterable[str] = ("full",) + ABLATIONS, codec: LatentCodec | None = None) -> list[dict]:
    """Train each variant with identical seed and budget; one row per variant in the given order."""
    rows = []
    for variant in variants:
        abl = [] if variant == "full" else [variant]
        if variant != "full" and variant not in ABLATIONS:
            raise SchemaError(f"unknown variant {variant!r}")
        cfg = TrainConfig.from_dict({**config_base.to_dict(), "ablation": abl})
        use_codec = None if "no_codec_pretrain" in abl else codec
        model = train(cfg, manifest_train, codec=use_codec)
        summary = evaluate(model, manifest_test).summary["none"]
        rows.append({"variant": variant, "f1": summary["f1_complement_max"], "iou": summary["iou"],
                     "plain_f1": summary["f1"], "final_loss": model.history[-1]["total"]})
        log.info("ablation %s: F1 %.4f", variant, rows[-1]["f1"])
    return rows
