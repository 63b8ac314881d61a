"""Degradation grid: Gaussian noise, JPEG round-trips, resizing and simulated social-network chains."""
from __future__ import annotations

import io
import math
import zlib
from dataclasses import dataclass

import numpy as np
import PIL
import torch
import torch.nn.functional as F
from PIL import Image, features

from .data import DatasetManifest, to_uint8
from .errors import CodecError, EmptyInput, SchemaError, TooSmall
from .metrics import EvalReport, binarize, metric_record

PERTURBATION_KINDS = ("none", "gaussian_noise", "jpeg", "resize", "osn_chain")
DEFAULT_GRID = "noise=0.1,0.3,0.5;jpeg=70,80,90;resize=0.7,0.8,0.9;osn=light,medium,heavy"

OSN_PROFILES = {
    "light": (("jpeg", 90),),
    "medium": (("resize", 0.9), ("jpeg", 80)),
    "heavy": (("resize", 0.8), ("jpeg", 70), ("jpeg", 70)),
}


def codec_version() -> str:
    return f"Pillow {PIL.__version__}, libjpeg {features.version('jpg')}"


@dataclass(frozen=True)
class Perturbation:
    kind: str = "none"
    parameter: float | int | str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise SchemaError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "osn_chain" and self.parameter not in OSN_PROFILES:
            raise SchemaError(f"unknown OSN profile {self.parameter!r}")

    @property
    def tag(self) -> str:
        if self.kind == "none":
            return "none"
        prefix = {"gaussian_noise": "noise", "jpeg": "jpeg", "resize": "resize", "osn_chain": "osn_"}[self.kind]
        return f"{prefix}{self.parameter}"


# ---------------------------------------------------------------- primitives

def noise_field(shape, sigma: float, seed: int = 0) -> np.ndarray:
    """The unclamped N(0, sigma²) field that ``add_gaussian_noise`` adds."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    return np.random.default_rng(seed).normal(0.0, sigma, size=shape)


def add_gaussian_noise(img: np.ndarray, sigma: float, seed: int = 0) -> np.ndarray:
    """Add i.i.d. N(0, sigma²) noise on the [0, 1] scale, then clamp."""
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    return np.clip(img + noise_field(img.shape, sigma, seed), 0.0, 1.0)


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Baseline JPEG encode/decode; 4:2:0 chroma below quality 95, 4:4:4 otherwise."""
    if not 1 <= int(quality) <= 100:
        raise CodecError(f"JPEG quality {quality} outside [1, 100]")
    buf = io.BytesIO()
    try:
        Image.fromarray(to_uint8(img), mode="RGB").save(
            buf, format="JPEG", quality=int(quality), subsampling=2 if quality < 95 else 0, optimize=False
        )
        buf.seek(0)
        out = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise CodecError(str(exc)) from exc
    return out / 255.0


def resized_dim(dim: int, factor: float, s: int = 4) -> int:
    target = math.floor(dim * factor + 0.5)
    return s * math.floor(target / s + 0.5)


def resize(img: np.ndarray, mask: np.ndarray | None, factor: float, s: int = 4):
    """Bilinear image / nearest-neighbour mask resampling to multiples of ``s``."""
    if not 0 < factor <= 1:
        raise ValueError("resize factor must be in (0, 1]")
    h, w = img.shape[:2]
    nh, nw = resized_dim(h, factor, s), resized_dim(w, factor, s)
    if nh < 2 * s or nw < 2 * s:
        raise TooSmall(f"{h}x{w} at factor {factor} gives {nh}x{nw} (< {2 * s})")
    if (nh, nw) == (h, w):
        return np.asarray(img, dtype=np.float64).copy(), None if mask is None else np.asarray(mask).copy()
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.interpolate(x, size=(nh, nw), mode="bilinear", align_corners=False, antialias=True)
    out = out[0].permute(1, 2, 0).clamp(0.0, 1.0).numpy()
    if mask is None:
        return out, None
    mt = torch.from_numpy(np.asarray(mask, dtype=np.float64))[None, None]
    mout = F.interpolate(mt, size=(nh, nw), mode="nearest-exact")[0, 0].numpy().astype(np.uint8)
    return out, mout


def _chain(img, mask, profile: str, s: int):
    if profile not in OSN_PROFILES:
        raise SchemaError(f"unknown OSN profile {profile!r}; choose from {sorted(OSN_PROFILES)}")
    for op, param in OSN_PROFILES[profile]:
        if op == "jpeg":
            img = jpeg_roundtrip(img, param)
        else:
            img, mask = resize(img, mask, param, s)
    return img, mask


def osn_chain(img: np.ndarray, profile: str, s: int = 4) -> np.ndarray:
    return _chain(img, None, profile, s)[0]


def apply_perturbation(img: np.ndarray, mask: np.ndarray, p: Perturbation, s: int = 4):
    """Perturb an (image, mask) pair. Masks are only ever geometrically resampled."""
    if p.kind == "none":
        return np.asarray(img, dtype=np.float64), mask
    if p.kind == "gaussian_noise":
        return add_gaussian_noise(img, float(p.parameter), p.seed), mask
    if p.kind == "jpeg":
        return jpeg_roundtrip(img, int(p.parameter)), mask
    if p.kind == "resize":
        return resize(img, mask, float(p.parameter), s)
    return _chain(img, mask, str(p.parameter), s)


# -------------------------------------------------------------------- grid

_GRID_KEYS = {"noise": ("gaussian_noise", float), "jpeg": ("jpeg", int), "resize": ("resize", float),
              "osn": ("osn_chain", str)}


def parse_grid(spec: str) -> list[Perturbation]:
    """Parse ``"noise=0.1,0.3;jpeg=70;..."``. The unperturbed cell is always first."""
    cells = [Perturbation()]
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        key, _, values = part.partition("=")
        key = key.strip()
        if key == "none":
            continue
        if key not in _GRID_KEYS or not values:
            raise SchemaError(f"bad grid entry {part!r}; keys are {sorted(_GRID_KEYS)}")
        kind, cast = _GRID_KEYS[key]
        for v in values.split(","):
            try:
                cells.append(Perturbation(kind, cast(v.strip())))
            except ValueError as exc:
                raise SchemaError(f"bad value {v!r} for {key}") from exc
    return cells


def _noise_seed(base: int, image_id: str) -> int:
    return (base * 1_000_003 + zlib.crc32(image_id.encode())) % 2**32


def run_suite(checkpoint, manifest: DatasetManifest, grid, seed: int = 0) -> EvalReport:
    """Perturb -> infer -> score for every (image, perturbation) cell."""
    from .train import infer, load_arrays

    if len(manifest) == 0:
        raise EmptyInput("evaluation manifest is empty")
    cells = parse_grid(grid) if isinstance(grid, str) else list(grid)
    images, masks = load_arrays(manifest)
    s = checkpoint.codec.s
    records = []
    for p in cells:
        for rec, img, mask in zip(manifest.records, images, masks):
            cell = Perturbation(p.kind, p.parameter, _noise_seed(seed, rec.image_path)) \
                if p.kind == "gaussian_noise" else p
            pimg, pmask = apply_perturbation(img, mask, cell, s)
            prob = infer(checkpoint, pimg)
            records.append(metric_record(pmask, binarize(prob), image_id=rec.image_path, perturbation=p.tag))
    return EvalReport.from_records(records, config_hash=checkpoint.config.hash())
