"""Seeded generator for a synthetic SEM-like wafer defect dataset.

Each sample is a patterned background (soft vertical/horizontal grating with
a seeded phase, period and tilt) plus at most one defect type, a pixel-exact
mask and a text mark rendered into a dark band at the bottom of the image.
Images are quantized to 8-bit levels at generation time so that a PNG round
trip is lossless.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import DEFECT_LABELS, LABELS, GenConfig
from .errors import ConfigError, DataError, InputError
from .font import GLYPH_H, render_text

MANIFEST_VERSION = 1
PROCESS_STEPS = ("ETCH", "CMP", "DEPO", "IMPL", "OXID", "LITH")

_BG_LO, _BG_HI = 0.25, 0.80
_BAND_LEVEL, _INK_LEVEL = 0.40, 0.70
_MAX_TRIES = 200


@dataclass
class WaferSample:
    image: np.ndarray  # (H, W) float64 in [0, 1], multiples of 1/255
    mask: np.ndarray  # (H, W) uint8 {0, 1}
    label: str
    text_marks: str
    sample_id: str
    seed: int
    meta: dict | None = None


@dataclass
class ManifestEntry:
    sample_id: str
    label: str
    image: str
    mask: str
    meta: str

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "label": self.label, "image": self.image,
                "mask": self.mask, "meta": self.meta}


@dataclass
class DatasetManifest:
    root: Path
    splits: dict[str, list[ManifestEntry]]
    config: dict
    seed: int
    version: int = MANIFEST_VERSION

    def entries(self, split: str) -> list[ManifestEntry]:
        return self.splits[split]

    def class_counts(self, split: str | None = None) -> dict[str, int]:
        names = [split] if split else list(self.splits)
        counts = {label: 0 for label in LABELS}
        for name in names:
            for entry in self.splits[name]:
                counts[entry.label] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "splits": {k: [e.to_dict() for e in v] for k, v in self.splits.items()},
        }


def derive_seed(global_seed: int, index: int) -> int:
    """Per-sample seed, a pure function of (global seed, sample index)."""
    return int(np.random.SeedSequence([int(global_seed), int(index)]).generate_state(1)[0])


def _check_dims(cfg: GenConfig) -> None:
    if cfg.height <= 0 or cfg.width <= 0 or cfg.height % 16 or cfg.width % 16:
        raise ConfigError(f"image dims must be positive multiples of 16, got {cfg.height}x{cfg.width}")
    if cfg.height - cfg.text_band < 24:
        raise ConfigError("text band leaves no room for defects")


def _grating(x: np.ndarray, y: np.ndarray, p: dict) -> np.ndarray:
    vert = 0.5 * (1.0 + np.cos(2.0 * math.pi * (x + p["phase_x"]) / p["period"]))
    horiz = 0.5 * (1.0 + np.cos(2.0 * math.pi * (y + p["phase_y"]) / p["period"]))
    return p["base"] + p["contrast_v"] * vert + p["contrast_h"] * horiz + p["tilt"] * (x / x.shape[1] - 0.5)


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return np.sqrt((u / rx) ** 2 + (v / ry) ** 2)


def _segment_distance(yy, xx, p0, p1):
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    t = ((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))


def _draw_defect(label, rng, yy, xx, clean, params, cfg):
    """One rejection-sampling attempt; returns (image, footprint)."""
    h_free = cfg.height - cfg.text_band
    lo_r, hi_r = 3.0, h_free - 3.0
    lo_c, hi_c = 3.0, cfg.width - 3.0

    if label == "hole":
        cy, cx = rng.uniform(lo_r + 4, hi_r - 4), rng.uniform(lo_c + 4, hi_c - 4)
        ry, rx = rng.uniform(3.0, 7.5), rng.uniform(3.0, 7.5)
        foot = _ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0, math.pi)) <= 1.0
        img = clean.copy()
        img[foot] = 0.02 + 0.1 * (clean[foot] - _BG_LO)
        return img, foot

    if label == "particle":
        n = int(rng.integers(1, 4))
        centers, radii = [], []
        for _ in range(n):
            centers.append((rng.uniform(lo_r + 2, hi_r - 2), rng.uniform(lo_c + 2, hi_c - 2)))
            radii.append(rng.uniform(1.5, 3.5))
        for i in range(n):
            for j in range(i):
                gap = math.dist(centers[i], centers[j]) - radii[i] - radii[j]
                if gap < 3.0:
                    return None
        img = clean.copy()
        foot = np.zeros_like(clean, dtype=bool)
        for (cy, cx), r in zip(centers, radii):
            d = np.hypot(yy - cy, xx - cx)
            disk = d <= r
            img[disk] = 0.9 + 0.08 * (1.0 - d[disk] / r)
            foot |= disk
        return img, foot

    if label == "scratch":
        y0, x0 = rng.uniform(lo_r, hi_r), rng.uniform(lo_c, hi_c)
        theta = rng.uniform(0, 2 * math.pi)
        l1, l2 = rng.uniform(12, 24), rng.uniform(10, 20)
        bend = rng.uniform(-0.5, 0.5)
        y1, x1 = y0 + l1 * math.sin(theta), x0 + l1 * math.cos(theta)
        y2, x2 = y1 + l2 * math.sin(theta + bend), x1 + l2 * math.cos(theta + bend)
        for py, px in ((y1, x1), (y2, x2)):
            if not (lo_r <= py <= hi_r and lo_c <= px <= hi_c):
                return None
        width = rng.uniform(1.6, 2.6)
        dist = np.minimum(_segment_distance(yy, xx, (y0, x0), (y1, x1)),
                          _segment_distance(yy, xx, (y1, x1), (y2, x2)))
        foot = dist <= width / 2.0
        img = clean.copy()
        img[foot] = 0.14 + 0.1 * (clean[foot] - _BG_LO)
        return img, foot

    if label == "pattern_deformation":
        cy, cx = rng.uniform(lo_r + 6, hi_r - 6), rng.uniform(lo_c + 6, hi_c - 6)
        ry, rx = rng.uniform(5.0, 9.5), rng.uniform(5.0, 9.5)
        rho = _ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0, math.pi))
        foot = rho <= 1.0
        amp, phi = rng.uniform(2.0, 4.0), rng.uniform(0, 2 * math.pi)
        envelope = np.where(foot, (1.0 - rho**2) ** 2, 0.0)
        dx, dy = amp * math.cos(phi) * envelope, amp * math.sin(phi) * envelope
        img = clean + (_grating(xx - dx, yy - dy, params) - _grating(xx, yy, params))
        img[foot] += 0.22
        weak = foot & (np.abs(img - clean) < 0.03)
        img[weak] += 0.06
        return np.clip(img, 0.0, 1.0), foot

    raise InputError(f"unknown label {label!r}")


def _render(seed: int, label: str, cfg: GenConfig, sample_id: str):
    _check_dims(cfg)
    if label not in LABELS:
        raise InputError(f"unknown label {label!r}; expected one of {LABELS}")
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    period = float(rng.integers(7, 10))
    params = {
        "period": period,
        "phase_x": rng.uniform(0, period),
        "phase_y": rng.uniform(0, period),
        "base": rng.uniform(0.34, 0.42),
        "contrast_v": rng.uniform(0.16, 0.24),
        "contrast_h": rng.uniform(0.06, 0.12),
        "tilt": rng.uniform(-0.04, 0.04),
    }
    step = PROCESS_STEPS[int(rng.integers(len(PROCESS_STEPS)))]
    text_marks = f"{sample_id.upper()}-{step}"
    noise = rng.normal(0.0, cfg.noise_std, size=(h, w))
    clean = np.clip(_grating(xx, yy, params) + noise, _BG_LO, _BG_HI)

    if label == "good":
        image, foot = clean.copy(), np.zeros((h, w), dtype=bool)
    else:
        lo, hi = cfg.area_bounds[label]
        for _ in range(_MAX_TRIES):
            drawn = _draw_defect(label, rng, yy, xx, clean, params, cfg)
            if drawn is None:
                continue
            image, foot = drawn
            if lo <= int(foot.sum()) <= hi:
                break
        else:
            raise ConfigError(f"could not place a {label} within area bounds {lo}..{hi}")

    band = slice(h - cfg.text_band, h)
    ink = render_text(text_marks, h, w, top=h - cfg.text_band + (cfg.text_band - GLYPH_H) // 2, left=2)
    for arr in (image, clean):
        arr[band, :] = _BAND_LEVEL
        arr[ink] = _INK_LEVEL
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    clean = np.round(clean * 255.0) / 255.0
    return image, clean, foot.astype(np.uint8), text_marks


def _metadata(sample_id, label, text_marks, seed, mask) -> dict:
    if mask.any():
        rows, cols = np.nonzero(mask)
        bbox = [int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())]
    else:
        bbox = None
    return {
        "sample_id": sample_id,
        "label": label,
        "text_marks": text_marks,
        "seed": int(seed),
        "defect_bbox": bbox,
        "defect_pixel_count": int(mask.sum()),
        "cause_key": None if label == "good" else label,
    }


def generate_sample(seed: int, label: str, cfg: GenConfig, sample_id: str = "w0000") -> WaferSample:
    """Render one sample; bit-identical for identical (seed, label, cfg, sample_id)."""
    image, _, mask, text_marks = _render(seed, label, cfg, sample_id)
    meta = _metadata(sample_id, label, text_marks, seed, mask)
    return WaferSample(image=image, mask=mask, label=label, text_marks=text_marks,
                       sample_id=sample_id, seed=int(seed), meta=meta)


def render_clean_background(seed: int, label: str, cfg: GenConfig, sample_id: str = "w0000") -> np.ndarray:
    """The same render as ``generate_sample`` with the defect left out."""
    return _render(seed, label, cfg, sample_id)[1]


def extract_text_marks(sample: WaferSample) -> str:
    """Stand-in for OCR: returns the text mark recorded in the sample metadata."""
    if sample.meta is None or "text_marks" not in sample.meta:
        raise DataError(f"sample {sample.sample_id!r} has no text_marks metadata")
    return str(sample.meta["text_marks"])


def blank_sample(cfg: GenConfig) -> WaferSample:
    """All-zero image used when a question comes without a picture."""
    shape = (cfg.height, cfg.width)
    return WaferSample(image=np.zeros(shape), mask=np.zeros(shape, dtype=np.uint8), label="good",
                       text_marks="", sample_id="blank", seed=0,
                       meta={"sample_id": "blank", "label": "good", "text_marks": ""})


def reference_images(cfg: GenConfig, seed: int, per_class: int) -> np.ndarray:
    """Unlabelled, class-balanced wafers from a seed stream separate from any dataset."""
    images, k = [], 0
    for label in LABELS:
        for _ in range(per_class):
            images.append(generate_sample(derive_seed(seed, k), label, cfg, f"r{k:04d}").image)
            k += 1
    return np.stack(images)


def split_counts(n: int, train_fraction: float) -> tuple[int, int]:
    n_train = int(math.floor(n * train_fraction + 0.5))
    return n_train, n - n_train


def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")


def generate_dataset(cfg: GenConfig, root: str | Path) -> DatasetManifest:
    """Write images, masks, metadata sidecars and ``manifest.json`` under ``root``."""
    cfg.validate()
    _check_dims(cfg)
    if sum(cfg.counts.values()) == 0:
        raise ConfigError("dataset would be empty: all class counts are zero")
    root = Path(root)
    for sub in ("images", "masks", "meta"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    splits: dict[str, list[ManifestEntry]] = {"train": [], "test": []}
    index = 0
    for label in LABELS:
        n = int(cfg.counts.get(label, 0))
        n_train, _ = split_counts(n, cfg.train_fraction)
        for i in range(n):
            sample_id = f"w{index:04d}"
            sample = generate_sample(derive_seed(cfg.seed, index), label, cfg, sample_id)
            entry = ManifestEntry(sample_id, label, f"images/{sample_id}.png",
                                  f"masks/{sample_id}.png", f"meta/{sample_id}.json")
            _write_png(root / entry.image, np.round(sample.image * 255.0))
            _write_png(root / entry.mask, sample.mask * 255)
            (root / entry.meta).write_text(json.dumps(sample.meta, indent=2, sort_keys=True) + "\n")
            splits["train" if i < n_train else "test"].append(entry)
            index += 1

    manifest = DatasetManifest(root=root, splits=splits, config=dataclasses.asdict(cfg), seed=cfg.seed)
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no manifest at {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {path}: {exc}") from exc
    splits = {k: [ManifestEntry(**e) for e in v] for k, v in data["splits"].items()}
    return DatasetManifest(root=root, splits=splits, config=data["config"], seed=data["seed"],
                           version=data.get("version", MANIFEST_VERSION))


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def load_sample(root: str | Path, entry: ManifestEntry) -> WaferSample:
    root = Path(root)
    image = read_image(root / entry.image)
    mask_path = root / entry.mask
    if not mask_path.exists():
        raise DataError(f"missing mask {mask_path}")
    mask = (read_image(mask_path) > 0.5).astype(np.uint8)
    try:
        meta = json.loads((root / entry.meta).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"bad metadata for {entry.sample_id}: {exc}") from exc
    return WaferSample(image=image, mask=mask, label=entry.label, text_marks=meta.get("text_marks", ""),
                       sample_id=entry.sample_id, seed=int(meta.get("seed", 0)), meta=meta)


def load_split(root: str | Path, split: str) -> list[WaferSample]:
    manifest = load_manifest(root)
    return [load_sample(root, e) for e in manifest.entries(split)]


def connected_regions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected component labelling of a binary mask."""
    structure = ndimage.generate_binary_structure(2, 1)
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=structure)
    return labels, int(n)
