"""Synthetic forgery dataset generation, manifests, and input preprocessing.

True images are procedural scenes (textured background + composited
shapes). Fakes come from one of two disjoint manipulation families:

* family A ("seen"): a rectangular patch copied from a rescaled donor
  region of the same image, alpha-blended at the borders. Mimics a
  swap/copy-move pipeline: straight blend seams plus mild resampling
  smoothing inside the patch.
* family B ("unseen"): an elliptical region replaced by low-frequency
  noise matched to the surrounding mean color. No straight seams, no
  donor content; the region simply loses its fine grain.

Every fake carries a pixel-exact binary mask of the manipulated area.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

SPLITS = ("train", "val", "test", "unseen")
# grain is the fine per-pixel texture whose local absence marks a forgery
GRAIN_SIGMA = 0.08
# shapes and backgrounds share one palette so class evidence cannot hide in
# global color statistics
_PALETTE = np.array([
    [0.55, 0.45, 0.40], [0.42, 0.52, 0.58], [0.50, 0.55, 0.42],
    [0.58, 0.50, 0.55], [0.45, 0.45, 0.52], [0.52, 0.48, 0.45],
], dtype=np.float32)


# ---------------------------------------------------------------------------
# preprocessing

def normalize(image: np.ndarray) -> np.ndarray:
    """Per-channel (v - mean) / std on channel-last pixels scaled to [0, 1]."""
    return (image.astype(np.float32) - IMAGENET_MEAN) / IMAGENET_STD


def denormalize(image: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize`."""
    return image.astype(np.float32) * IMAGENET_STD + IMAGENET_MEAN


def add_gaussian_noise(batch: np.ndarray, rng: np.random.Generator,
                       sigma_max: float = 5.0) -> np.ndarray:
    """Add zero-mean Gaussian noise with one sigma ~ U[0, sigma_max] per batch.

    Expects the batch in raw [0, 255] pixel scale, before normalization.
    """
    sigma = rng.uniform(0.0, sigma_max)
    if sigma == 0.0:
        return batch
    return batch + rng.normal(0.0, sigma, size=batch.shape).astype(np.float32)


class NoiseAugmenter:
    """Train-time noise injector; a no-op (with a warning counter) in eval mode."""

    def __init__(self, sigma_max: float = 5.0):
        self.sigma_max = sigma_max
        self.training = True
        self.eval_call_count = 0

    def train(self) -> "NoiseAugmenter":
        self.training = True
        return self

    def eval(self) -> "NoiseAugmenter":
        self.training = False
        return self

    def __call__(self, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if not self.training:
            self.eval_call_count += 1
            return batch
        return add_gaussian_noise(batch, rng, self.sigma_max)


# ---------------------------------------------------------------------------
# procedural scenes

def _upsampled_noise(rng: np.random.Generator, size: int, cells: int,
                     channels: int = 3) -> np.ndarray:
    """Low-frequency field: a cells x cells Gaussian grid, bilinearly upsampled."""
    grid = rng.normal(0.0, 1.0, size=(cells, cells, channels)).astype(np.float32)
    out = np.empty((size, size, channels), dtype=np.float32)
    for c in range(channels):
        im = Image.fromarray(grid[:, :, c], mode="F")
        out[:, :, c] = np.asarray(im.resize((size, size), Image.BILINEAR))
    return out


def _ellipse_alpha(size: int, cx: float, cy: float, a: float, b: float,
                   theta: float = 0.0) -> np.ndarray:
    """Anti-aliased ellipse coverage in [0, 1] (~1 px soft edge)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    xr = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
    yr = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
    r = np.sqrt((xr / a) ** 2 + (yr / b) ** 2)
    edge = min(a, b)
    return np.clip((1.0 - r) * edge + 0.5, 0.0, 1.0)


def _rect_alpha(size: int, y0: float, x0: float, y1: float, x1: float) -> np.ndarray:
    """Anti-aliased axis-aligned rectangle coverage."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    d = np.minimum(np.minimum(xx - x0, x1 - xx), np.minimum(yy - y0, y1 - yy))
    return np.clip(d + 0.5, 0.0, 1.0)


def make_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Procedural true image: gradient + low-freq blobs + shapes + fine grain.

    Scene statistics are kept narrow (shared palette band, similar texture
    energy everywhere) so a detector cannot separate images by global color
    or grain level; a forgery is only visible as a local texture anomaly.
    The grain level itself varies per image, which keeps global grain
    energy uninformative about whether a patch inside lost its grain.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)

    base = _PALETTE[int(rng.integers(len(_PALETTE)))]
    tilt = rng.uniform(-0.06, 0.06, size=3).astype(np.float32)
    ang = rng.uniform(0.0, 2.0 * math.pi)
    t = (xx * math.cos(ang) + yy * math.sin(ang) + 1.0) / 3.0
    img = base[None, None, :] + tilt[None, None, :] * (t[:, :, None] - 0.5)

    img += 0.04 * _upsampled_noise(rng, size, cells=int(rng.integers(3, 6)))

    for _ in range(3):
        color = _PALETTE[int(rng.integers(len(_PALETTE)))]
        if rng.uniform() < 0.5:
            a = rng.uniform(0.08, 0.16) * size
            b = rng.uniform(0.08, 0.16) * size
            cx = rng.uniform(0.15, 0.85) * size
            cy = rng.uniform(0.15, 0.85) * size
            alpha = _ellipse_alpha(size, cx, cy, a, b, rng.uniform(0, math.pi))
        else:
            w = rng.uniform(0.15, 0.3) * size
            h = rng.uniform(0.15, 0.3) * size
            x0 = rng.uniform(0.0, size - w)
            y0 = rng.uniform(0.0, size - h)
            alpha = _rect_alpha(size, y0, x0, y0 + h, x0 + w)
        img = img * (1.0 - alpha[:, :, None]) + color[None, None, :] * alpha[:, :, None]

    sigma = rng.uniform(0.85, 1.25) * GRAIN_SIGMA
    grain = rng.normal(0.0, sigma, size=(size, size, 1)).astype(np.float32)
    grain = grain + rng.normal(0.0, sigma / 4, size=(size, size, 3)).astype(np.float32)
    return np.clip(img + grain, 0.0, 1.0)


# ---------------------------------------------------------------------------
# manipulations

def _resize_float(patch: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Per-channel PIL bilinear resize (anti-aliased on downscale)."""
    h, w = out_hw
    out = np.empty((h, w, patch.shape[2]), dtype=np.float32)
    for c in range(patch.shape[2]):
        im = Image.fromarray(np.ascontiguousarray(patch[:, :, c]), mode="F")
        out[:, :, c] = np.asarray(im.resize((w, h), Image.BILINEAR))
    return out


def _sample_rect(rng: np.random.Generator, size: int,
                 lo: float = 0.08, hi: float = 0.25) -> tuple[int, int]:
    """Patch height/width with area fraction strictly inside [lo, hi]."""
    total = size * size
    frac = rng.uniform(lo, hi)
    aspect = rng.uniform(0.6, 1.6)
    area = frac * total
    ph = int(np.clip(round(math.sqrt(area * aspect)), 2, size - 2))
    # keep the rounded product inside the sampled fraction range
    pw_lo = max(2, math.ceil(lo * total / ph))
    pw_hi = min(size - 2, math.floor(hi * total / ph))
    pw = int(np.clip(round(area / ph), pw_lo, pw_hi))
    return ph, pw


def manipulate_family_a(image: np.ndarray, rng: np.random.Generator,
                        ramp: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Copy a rescaled donor rectangle over a target rectangle, alpha-blended.

    The donor region is sampled larger than the target and resampled down,
    which damps the fine grain inside the patch the way swap pipelines do.
    ``ramp`` (pixels, default random 2..4) is the cosine blend band at the
    borders; 0 means hard paste. Mask = blend alpha > 0.5.
    """
    size = image.shape[0]
    ph, pw = _sample_rect(rng, size)
    ty = int(rng.integers(0, size - ph + 1))
    tx = int(rng.integers(0, size - pw + 1))

    scale = rng.uniform(2.5, 3.5)
    dh = min(int(round(ph * scale)), size)
    dw = min(int(round(pw * scale)), size)
    for _ in range(16):
        dy = int(rng.integers(0, size - dh + 1))
        dx = int(rng.integers(0, size - dw + 1))
        if abs(dy - ty) + abs(dx - tx) >= max(8, size // 8):
            break
    donor = _resize_float(image[dy:dy + dh, dx:dx + dw], (ph, pw))

    if ramp is None:
        ramp = rng.uniform(4.0, 6.0)
    alpha = np.zeros((size, size), dtype=np.float32)
    if ramp <= 0.0:
        alpha[ty:ty + ph, tx:tx + pw] = 1.0
    else:
        ys, xs = np.mgrid[0:ph, 0:pw].astype(np.float32)
        d = np.minimum(np.minimum(xs + 0.5, pw - 0.5 - xs),
                       np.minimum(ys + 0.5, ph - 0.5 - ys))
        local = np.where(d >= ramp, 1.0,
                         0.5 - 0.5 * np.cos(np.pi * np.clip(d, 0, ramp) / ramp))
        alpha[ty:ty + ph, tx:tx + pw] = local

    forged = image.copy()
    reg = forged[ty:ty + ph, tx:tx + pw]
    a = alpha[ty:ty + ph, tx:tx + pw, None]
    forged[ty:ty + ph, tx:tx + pw] = reg * (1.0 - a) + donor * a
    mask = alpha > 0.5

    if not np.any(np.abs(forged - image)[mask] > 0):
        # degenerate donor == target content; force a visible change
        forged[ty + ph // 2, tx + pw // 2] = 1.0 - forged[ty + ph // 2, tx + pw // 2]
    return np.clip(forged, 0.0, 1.0), mask


def _grain_sigma_estimate(image: np.ndarray, region: np.ndarray) -> float:
    """Std of the pixel-scale residual (image minus 3x3 mean) over a region."""
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = np.zeros_like(image)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy:dy + image.shape[0], dx:dx + image.shape[1]]
    residual = image - acc / 9.0
    return float(residual[region].std() / 0.94)


def manipulate_family_b(image: np.ndarray, rng: np.random.Generator,
                        axis_ratio: float | None = None,
                        area_fraction: float | None = None
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Replace an elliptical region with color-matched low-frequency noise.

    The fill mean equals the surrounding annulus mean, so there is no color
    seam; the region simply loses its fine-grain texture. Mask = ellipse
    interior. ``axis_ratio`` / ``area_fraction`` override the sampled
    geometry (axis_ratio=1 gives a circle).
    """
    size = image.shape[0]
    frac = rng.uniform(0.08, 0.16) if area_fraction is None else area_fraction
    q = rng.uniform(0.55, 1.0) if axis_ratio is None else axis_ratio
    a = math.sqrt(frac * size * size / (math.pi * q))
    b = a * q
    theta = rng.uniform(0.0, math.pi)
    # rotated ellipse extents along x/y
    ex = math.sqrt((a * math.cos(theta)) ** 2 + (b * math.sin(theta)) ** 2)
    ey = math.sqrt((a * math.sin(theta)) ** 2 + (b * math.cos(theta)) ** 2)
    margin = 2.0
    cx = rng.uniform(ex + margin, size - ex - margin) if size > 2 * (ex + margin) else size / 2
    cy = rng.uniform(ey + margin, size - ey - margin) if size > 2 * (ey + margin) else size / 2

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    xr = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
    yr = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
    r2 = (xr / a) ** 2 + (yr / b) ** 2
    mask = r2 <= 1.0
    ring = (r2 <= 1.6) & ~mask
    if not np.any(ring):
        ring = ~mask

    mean_color = image[ring].mean(axis=0)
    # band-limited fill: a smooth color field plus block noise whose energy
    # matches the surroundings but whose finest-octave texture is missing,
    # so the region reads as plausible until its grain band is inspected
    sigma_est = _grain_sigma_estimate(image, ring)
    low = _upsampled_noise(rng, size, cells=4) * 0.04
    half = size // 2
    block = rng.normal(0.0, 1.0, size=(half, half, 1)).astype(np.float32)
    block = block + rng.normal(0.0, 0.25, size=(half, half, 3)).astype(np.float32)
    block = np.repeat(np.repeat(block, 2, axis=0), 2, axis=1)[:size, :size]
    low = low + block * (0.95 * sigma_est)
    low -= low[mask].mean(axis=0)  # keep fill mean exactly at the annulus mean
    fill = np.clip(mean_color[None, None, :] + low, 0.0, 1.0)

    forged = np.where(mask[:, :, None], fill, image)
    return forged.astype(np.float32), mask


# ---------------------------------------------------------------------------
# manifest and corpus

@dataclass
class GeneratorConfig:
    size: int = 64
    train: int = 200
    val: int = 40
    test: int = 40
    unseen: int = 40
    seed: int = 7
    out: Path = Path("data")

    def counts(self) -> dict[str, int]:
        return {"train": self.train, "val": self.val,
                "test": self.test, "unseen": self.unseen}


@dataclass
class ManifestRecord:
    id: str
    image: str
    label: int  # 0 = fake, 1 = true
    split: str
    mask: str | None = None
    family: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    image_size: int
    records: list[ManifestRecord] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for r in self.records:
            c = out.setdefault(r.split, {"true": 0, "fake": 0})
            c["true" if r.label == 1 else "fake"] += 1
        return out

    def save(self) -> Path:
        path = self.root / "manifest.jsonl"
        with open(path, "w") as f:
            meta = {"kind": "meta", "seed": self.seed, "image_size": self.image_size,
                    "counts": self.counts()}
            f.write(json.dumps(meta, sort_keys=True) + "\n")
            for r in self.records:
                rec = {"kind": "record", "id": r.id, "image": r.image, "mask": r.mask,
                       "label": r.label, "split": r.split, "family": r.family}
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        return path


def load_manifest(root: Path | str) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.jsonl" if root.is_dir() else root
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    manifest = None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if obj.get("kind") == "meta":
                manifest = DatasetManifest(root=root, seed=obj["seed"],
                                           image_size=obj["image_size"])
            elif obj.get("kind") == "record":
                if manifest is None:
                    raise ValueError(f"manifest {path} is missing its meta line")
                manifest.records.append(ManifestRecord(
                    id=obj["id"], image=obj["image"], mask=obj["mask"],
                    label=obj["label"], split=obj["split"], family=obj["family"]))
    if manifest is None:
        raise ValueError(f"manifest {path} is empty")
    return manifest


def _save_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path)


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}


def _image_rng(seed: int, split: str, label: int, index: int) -> np.random.Generator:
    # independent per-image stream: generation is order-free and parallelizable
    return np.random.default_rng(
        np.random.SeedSequence([seed, _SPLIT_CODE[split], label, index]))


def generate_dataset(cfg: GeneratorConfig) -> DatasetManifest:
    """Generate a balanced synthetic corpus and write it under ``cfg.out``.

    Each split holds ``count`` true and ``count`` fake images; train/val/test
    fakes use family A, the unseen split uses family B. Deterministic in
    (cfg, seed), byte-for-byte.
    """
    if cfg.size < 32 or cfg.size % 16 != 0:
        raise ValueError(f"image size must be >= 32 and divisible by 16, got {cfg.size}")
    for name, count in cfg.counts().items():
        if count <= 0 or count % 2 != 0:
            raise ValueError(f"split count must be positive and even, got {name}={count}")

    root = Path(cfg.out)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {root}: {e}") from e

    manifest = DatasetManifest(root=root, seed=cfg.seed, image_size=cfg.size)
    for split, count in cfg.counts().items():
        family = "B" if split == "unseen" else "A"
        manipulate = manipulate_family_b if family == "B" else manipulate_family_a
        for i in range(count):
            rid = f"{split}_true_{i:05d}"
            rng = _image_rng(cfg.seed, split, 1, i)
            _save_png(root / "images" / f"{rid}.png", _to_uint8(make_scene(rng, cfg.size)))
            manifest.records.append(ManifestRecord(
                id=rid, image=f"images/{rid}.png", label=1, split=split))
        for i in range(count):
            rid = f"{split}_fake_{i:05d}"
            rng = _image_rng(cfg.seed, split, 0, i)
            base = make_scene(rng, cfg.size)
            forged, mask = manipulate(base, rng)
            _save_png(root / "images" / f"{rid}.png", _to_uint8(forged))
            _save_png(root / "masks" / f"{rid}.png",
                      (mask.astype(np.uint8) * 255))
            manifest.records.append(ManifestRecord(
                id=rid, image=f"images/{rid}.png", mask=f"masks/{rid}.png",
                label=0, split=split, family=family))
    manifest.save()
    return manifest


def load_image(manifest: DatasetManifest, record: ManifestRecord) -> np.ndarray:
    """Raw uint8 H x W x 3 pixels for a record."""
    return np.asarray(Image.open(manifest.root / record.image).convert("RGB"))


def load_mask(manifest: DatasetManifest, record: ManifestRecord) -> np.ndarray | None:
    if record.mask is None:
        return None
    arr = np.asarray(Image.open(manifest.root / record.mask).convert("L"))
    return (arr > 127).astype(np.float32)


@dataclass
class SplitArrays:
    """One split loaded into memory for training/eval."""
    ids: list[str]
    images: np.ndarray           # uint8 (N, H, W, 3)
    labels: np.ndarray           # int64 (N,), 1 = true
    masks: dict[str, np.ndarray]  # id -> float (H, W) binary, fakes only


def load_split_arrays(manifest: DatasetManifest, split: str) -> SplitArrays:
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    ids = [r.id for r in records]
    images = np.stack([load_image(manifest, r) for r in records])
    labels = np.array([r.label for r in records], dtype=np.int64)
    masks = {}
    for r in records:
        m = load_mask(manifest, r)
        if m is not None:
            masks[r.id] = m
    return SplitArrays(ids=ids, images=images, labels=labels, masks=masks)
