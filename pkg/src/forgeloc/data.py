"""Image/mask IO, dataset manifests and the procedural forgery generator.

Images are ``float64`` arrays of shape ``(H, W, 3)`` in ``[0, 1]``; masks are
``uint8`` arrays of shape ``(H, W)`` holding only 0 (authentic) and 1 (forged).
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .errors import DecodeError, DegenerateRegion, FileMissing, InvalidKind, SchemaError, ShapeMismatch

KINDS = ("copy-move", "splice", "inpaint", "pristine")
FORGED_KINDS = KINDS[:3]
SPLITS = ("train", "val", "test")
MASK_THRESHOLD = 128
MIN_REGION_AREA = 16
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ForgeryRecord:
    image_path: str
    mask_path: str
    forgery_kind: str
    seed: int

    def __post_init__(self):
        if self.forgery_kind not in KINDS:
            raise InvalidKind(f"unknown forgery kind {self.forgery_kind!r}; expected one of {KINDS}")


@dataclass
class DatasetManifest:
    records: list[ForgeryRecord] = field(default_factory=list)
    split: str = "train"
    # directory that relative record paths resolve against; not serialized
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise SchemaError(f"unknown split {self.split!r}")
        seen = set()
        for rec in self.records:
            if rec.image_path in seen:
                raise SchemaError(f"duplicate image_path {rec.image_path!r} in split {self.split!r}")
            seen.add(rec.image_path)

    def __len__(self):
        return len(self.records)

    def head(self, n: int) -> "DatasetManifest":
        return DatasetManifest(records=self.records[:n], split=self.split, root=self.root)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p


# --------------------------------------------------------------------------- IO

def _open_png(path) -> Image.Image:
    path = Path(path)
    if not path.exists():
        raise FileMissing(str(path))
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return img


def load_image(path) -> np.ndarray:
    """Load an 8-bit grayscale or RGB PNG as an ``(H, W, 3)`` float array in [0, 1]."""
    img = _open_png(path)
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.float64)[..., None].repeat(3, axis=2)
    elif img.mode == "RGB":
        arr = np.asarray(img, dtype=np.float64)
    else:
        raise DecodeError(f"{path}: unsupported PNG mode {img.mode!r} (need 8-bit L or RGB)")
    return arr / 255.0


def load_mask(path) -> np.ndarray:
    img = _open_png(path)
    if img.mode != "L":
        raise DecodeError(f"{path}: mask must be 8-bit grayscale, got mode {img.mode!r}")
    return (np.asarray(img) >= MASK_THRESHOLD).astype(np.uint8)


def check_pair(image: np.ndarray, mask: np.ndarray) -> None:
    if image.shape[:2] != mask.shape:
        raise ShapeMismatch(f"image {image.shape[:2]} and mask {mask.shape} differ in H×W")


def load_pair(manifest: DatasetManifest, rec: ForgeryRecord) -> tuple[np.ndarray, np.ndarray]:
    image = load_image(manifest.resolve(rec.image_path))
    mask = load_mask(manifest.resolve(rec.mask_path))
    check_pair(image, mask)
    return image, mask


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


# --------------------------------------------------------------------- manifest

_RECORD_KEYS = ("image_path", "mask_path", "forgery_kind", "seed")


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [json.dumps({"version": MANIFEST_VERSION, "split": manifest.split})]
    lines += [json.dumps(asdict(rec)) for rec in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileMissing(str(path))
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise SchemaError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    if header.get("version") != MANIFEST_VERSION or "split" not in header:
        raise SchemaError(f"{path}: bad header {header!r}")
    records = []
    for i, row in enumerate(rows, start=2):
        missing = [k for k in _RECORD_KEYS if k not in row]
        if missing:
            raise SchemaError(f"{path}:{i}: missing field(s) {missing}")
        if not isinstance(row["seed"], int):
            raise SchemaError(f"{path}:{i}: seed must be an integer")
        try:
            records.append(ForgeryRecord(**{k: row[k] for k in _RECORD_KEYS}))
        except InvalidKind as exc:
            raise SchemaError(f"{path}:{i}: {exc}") from exc
    return DatasetManifest(records=records, split=header["split"], root=path.parent)


# -------------------------------------------------------------------- generator

def _texture(rng: np.random.Generator, h: int, w: int, noise_amp: float | None = None) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h - 1
    xx /= w - 1
    base = rng.uniform(0.25, 0.75, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = ramp - ramp.mean()
    tint = rng.uniform(0.5, 1.0, size=3)
    img = base + rng.uniform(0.2, 0.45) * ramp[..., None] * tint

    blobs = gaussian_filter(rng.standard_normal((h, w)), sigma=rng.uniform(3.0, 6.0), mode="wrap")
    blobs /= blobs.std() + 1e-12
    img += rng.uniform(0.03, 0.08) * blobs[..., None] * rng.uniform(0.6, 1.0, size=3)

    period = int(rng.choice([4, 8, 16]))
    oy, ox = rng.integers(0, period, size=2)
    checker = (((np.arange(h)[:, None] + oy) // (period // 2) + (np.arange(w)[None, :] + ox) // (period // 2)) % 2)
    img += rng.uniform(0.0, 0.05) * (checker[..., None] - 0.5)

    if noise_amp is None:
        noise_amp = rng.uniform(0.01, 0.05)
    grain = gaussian_filter(rng.standard_normal((h, w, 3)), sigma=(0.5, 0.5, 0))
    grain /= grain.std() + 1e-12
    img += noise_amp * grain
    return np.clip(img, 0.0, 1.0)


def _region(rng: np.random.Generator, h: int, w: int) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Sample an ellipse/rectangle mask; returns it with its bounding box (y0, x0, y1, x1)."""
    for _ in range(100):
        ry = int(rng.integers(max(2, h // 10), max(3, h * 3 // 10) + 1))
        rx = int(rng.integers(max(2, w // 10), max(3, w * 3 // 10) + 1))
        cy = int(rng.integers(ry, h - ry))
        cx = int(rng.integers(rx, w - rx))
        y0, x0, y1, x1 = cy - ry, cx - rx, cy + ry, cx + rx
        mask = np.zeros((h, w), dtype=np.uint8)
        if rng.random() < 0.5:
            mask[y0:y1, x0:x1] = 1
        else:
            yy, xx = np.mgrid[0:h, 0:w]
            inside = ((yy - cy + 0.5) / ry) ** 2 + ((xx - cx + 0.5) / rx) ** 2 <= 1.0
            mask[inside] = 1
        if MIN_REGION_AREA <= mask.sum() <= 0.5 * h * w:
            return mask, (y0, x0, y1, x1)
    raise DegenerateRegion(f"could not sample a valid region for {h}x{w}")


def synthesize_forgery(seed: int, kind: str, height: int = 64, width: int = 64):
    """Generate one deterministic (image, mask, record) triple.

    The same ``(seed, kind, height, width)`` always yields bit-identical arrays.
    """
    if kind not in KINDS:
        raise InvalidKind(f"unknown forgery kind {kind!r}; expected one of {KINDS}")
    if height < 32 or width < 32:
        raise ValueError("height and width must be >= 32")
    rng = np.random.default_rng([int(seed), KINDS.index(kind)])
    host_noise = rng.uniform(0.01, 0.05)
    image = _texture(rng, height, width, noise_amp=host_noise)
    mask = np.zeros((height, width), dtype=np.uint8)

    if kind != "pristine":
        region, (y0, x0, y1, x1) = _region(rng, height, width)
        sel = region.astype(bool)
        if kind == "splice":
            # donor grain differs from the host by at least 2x
            donor_noise = host_noise * rng.uniform(2.0, 3.0) if rng.random() < 0.5 else host_noise / rng.uniform(2.0, 3.0)
            donor = _texture(rng, height, width, noise_amp=donor_noise)
            image[sel] = donor[sel]
        elif kind == "copy-move":
            # source box must not overlap the target box, so the copy survives intact
            for _ in range(200):
                bh, bw = y1 - y0, x1 - x0
                sy = int(rng.integers(0, height - bh + 1))
                sx = int(rng.integers(0, width - bw + 1))
                if abs(sy - y0) >= bh or abs(sx - x0) >= bw:
                    break
                region, (y0, x0, y1, x1) = _region(rng, height, width)
            else:
                raise DegenerateRegion("no non-overlapping copy-move source found")
            sel = region.astype(bool)
            dy, dx = sy - y0, sx - x0
            src = np.roll(image, shift=(-dy, -dx), axis=(0, 1))
            image = image.copy()
            image[sel] = src[sel]
        else:  # inpaint
            smooth = gaussian_filter(image, sigma=(4.0, 4.0, 0), mode="reflect")
            image[sel] = smooth[sel]
        mask = region

    record = ForgeryRecord(
        image_path=f"{kind}-{seed}.png",
        mask_path=f"{kind}-{seed}_mask.png",
        forgery_kind=kind,
        seed=int(seed),
    )
    return image, mask, record


def synthesize_dataset(
    out_dir,
    seeds: Sequence[int],
    kinds: Iterable[str] = FORGED_KINDS,
    size: int = 64,
    split: str = "train",
    workers: int = 1,
) -> DatasetManifest:
    """Write PNGs for each seed (cycling through ``kinds``) plus a ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kinds = list(kinds)
    jobs = [(int(s), kinds[i % len(kinds)]) for i, s in enumerate(seeds)]

    def _one(job):
        seed, kind = job
        image, mask, rec = synthesize_forgery(seed, kind, size, size)
        save_image(image, out_dir / rec.image_path)
        save_mask(mask, out_dir / rec.mask_path)
        return rec

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(_one, jobs))
    else:
        records = [_one(j) for j in jobs]
    manifest = DatasetManifest(records=records, split=split, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
