"""Image-level-labelled collections, grid tiling, augmentation and mask I/O."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DataError

log = logging.getLogger(__name__)

MANIFEST_NAME = "classes.txt"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".webp"}

# class 0 pink, 1 green, 2 orange, 3 yellow; extra ids (e.g. the outlier fish class) follow
PALETTE = np.array(
    [
        [255, 192, 203],
        [0, 200, 0],
        [255, 165, 0],
        [255, 255, 0],
        [30, 144, 255],
        [148, 0, 211],
        [128, 128, 128],
        [0, 0, 0],
    ],
    dtype=np.uint8,
)


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    source_id: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int

    def __post_init__(self):
        if int(self.rows) < 1 or int(self.cols) < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """Parse ``"RxC"`` (rows first), e.g. ``"5x8"``."""
        parts = text.lower().replace("×", "x").split("x")
        if len(parts) != 2:
            raise ValueError(f"grid must look like RxC, got {text!r}")
        try:
            return cls(int(parts[0]), int(parts[1]))
        except ValueError as exc:
            raise ValueError(f"grid must look like RxC, got {text!r}") from exc

    def __str__(self) -> str:
        return f"{self.rows}x{self.cols}"

    @property
    def size(self) -> int:
        return self.rows * self.cols


@dataclass
class Patch:
    pixels: np.ndarray
    row: int
    col: int
    parent_id: str
    inherited_label: int

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.parent_id, self.row, self.col)

    def with_pixels(self, pixels: np.ndarray) -> "Patch":
        return Patch(pixels, self.row, self.col, self.parent_id, self.inherited_label)


@dataclass
class ClassMask:
    labels: np.ndarray
    probs: np.ndarray
    source_id: str = ""

    @property
    def grid(self) -> GridSpec:
        return GridSpec(*self.labels.shape)

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "rows": int(self.labels.shape[0]),
            "cols": int(self.labels.shape[1]),
            "labels": self.labels.astype(int).tolist(),
            "probs": [[[float(f"{p:.9g}") for p in cell] for cell in row] for row in self.probs],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClassMask":
        labels = np.asarray(data["labels"], dtype=np.int64)
        if labels.shape != (data["rows"], data["cols"]):
            raise DataError(f"mask {data.get('source_id')!r}: labels shape {labels.shape} != rows x cols")
        probs = data.get("probs")
        if probs is None:
            probs = np.zeros(labels.shape + (int(labels.max()) + 1,))
            np.put_along_axis(probs, labels[..., None], 1.0, axis=2)
        return cls(labels, np.asarray(probs, dtype=np.float64), data.get("source_id", ""))


@dataclass
class AugConfig:
    """Augmentation switches. Every ``*_p`` is the probability that the step runs."""

    hflip_p: float = 0.5
    vflip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.0, 1.5)
    channel_p: float = 0.0
    channel_scale: float = 0.1
    scale_p: float = 0.0
    scale_range: float = 0.2
    crop_size: tuple[int, int] | None = None

    def __post_init__(self):
        for name in ("hflip_p", "vflip_p", "jitter_p", "blur_p", "channel_p", "scale_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name in ("brightness", "contrast", "saturation", "channel_scale", "scale_range"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not 0.0 <= self.hue <= 0.5:
            raise ValueError("hue must lie in [0, 0.5]")
        lo, hi = self.blur_sigma
        if lo < 0 or hi < lo:
            raise ValueError(f"bad blur_sigma range {self.blur_sigma}")

    @classmethod
    def identity(cls) -> "AugConfig":
        return cls(hflip_p=0.0, vflip_p=0.0, jitter_p=0.0, blur_p=0.0, channel_p=0.0, scale_p=0.0)

    @classmethod
    def finetune(cls) -> "AugConfig":
        """Colour-channel, contrast, blur, brightness/hue/saturation, x/y scaling and left/right flips."""
        return cls(
            hflip_p=0.5,
            vflip_p=0.0,
            jitter_p=0.8,
            blur_p=0.3,
            channel_p=0.5,
            scale_p=0.5,
        )


# ---------------------------------------------------------------- loading


def read_manifest(path: str | os.PathLike) -> list[str]:
    """Class names, one per line; line 0 is the background class."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    names = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    if not names:
        raise DataError(f"class manifest {path} is empty")
    if len(set(names)) != len(names):
        raise DataError(f"class manifest {path} has duplicate names")
    return names


def decode_image(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def _image_files(folder: Path) -> list[Path]:
    return sorted(
        p for p in folder.iterdir() if p.is_file() and not p.name.startswith(".") and p.suffix.lower() in IMAGE_SUFFIXES
    )


def load_dataset(root: str | os.PathLike, class_names: list[str], jobs: int = 1) -> list[LabeledImage]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not subdirs:
        raise DataError(f"no class directories under {root}")
    known = {name: i for i, name in enumerate(class_names)}
    for d in subdirs:
        if d.name not in known:
            log.warning("skipping unknown class directory %s", d)

    jobs_list: list[tuple[Path, int, str]] = []
    for name in sorted(known):
        folder = root / name
        if not folder.is_dir():
            continue
        files = _image_files(folder)
        if not files:
            raise DataError(f"class directory {folder} holds no images")
        jobs_list.extend((f, known[name], f"{name}/{f.name}") for f in files)
    if not jobs_list:
        raise DataError(f"no class directories under {root} match the manifest")
    jobs_list.sort(key=lambda item: item[2])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            arrays = list(pool.map(lambda item: decode_image(item[0]), jobs_list))
    else:
        arrays = [decode_image(item[0]) for item in jobs_list]
    return [LabeledImage(arr, label, sid) for arr, (_, label, sid) in zip(arrays, jobs_list)]


# ---------------------------------------------------------------- tiling


def tile_image(image: LabeledImage, grid: GridSpec) -> list[Patch]:
    """Split into a row-major rows×cols grid of equal patches.

    Leftover pixels (when H or W do not divide evenly) are trimmed from a
    centred window; the extra odd pixel goes to the bottom/right edge.
    """
    h, w = image.shape
    if h < grid.rows or w < grid.cols:
        raise ValueError(f"image {image.source_id!r} ({h}x{w}) is smaller than grid {grid}")
    ph, pw = h // grid.rows, w // grid.cols
    top = (h - ph * grid.rows) // 2
    left = (w - pw * grid.cols) // 2
    patches = []
    for r in range(grid.rows):
        y = top + r * ph
        for c in range(grid.cols):
            x = left + c * pw
            patches.append(Patch(image.pixels[y : y + ph, x : x + pw], r, c, image.source_id, image.label))
    return patches


def reassemble_mask(patch_probs, grid: GridSpec, source_id: str = "") -> ClassMask:
    probs = np.asarray(patch_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != grid.size:
        raise ValueError(f"expected {grid.size} probability vectors for grid {grid}, got {probs.shape[0] if probs.ndim else 0}")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("each patch probability vector must sum to 1")
    probs = probs.reshape(grid.rows, grid.cols, -1)
    # np.argmax returns the first maximum: ties go to the lowest class id
    return ClassMask(np.argmax(probs, axis=2), probs, source_id)


# ---------------------------------------------------------------- augmentation


def random_crop(patch: Patch, size: tuple[int, int], rng: np.random.Generator) -> Patch:
    h, w = patch.pixels.shape[:2]
    ch, cw = size
    if ch > h or cw > w or ch < 1 or cw < 1:
        raise ValueError(f"crop {ch}x{cw} does not fit patch {h}x{w}")
    y = int(rng.integers(0, h - ch + 1))
    x = int(rng.integers(0, w - cw + 1))
    return patch.with_pixels(patch.pixels[y : y + ch, x : x + cw].copy())


def _rgb_to_hsv(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0, np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def _hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choices = [
        np.stack([v, t, p], -1),
        np.stack([q, v, p], -1),
        np.stack([p, v, t], -1),
        np.stack([p, q, v], -1),
        np.stack([t, p, v], -1),
        np.stack([v, p, q], -1),
    ]
    out = np.zeros_like(hsv)
    for k, arr in enumerate(choices):
        out = np.where((i == k)[..., None], arr, out)
    return out


def _gray(px):
    return px @ np.array([0.299, 0.587, 0.114])


def _color_jitter(px, cfg: AugConfig, rng):
    b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    hue = rng.uniform(-cfg.hue, cfg.hue)
    px = np.clip(px * b, 0.0, 1.0)
    px = np.clip((px - _gray(px).mean()) * c + _gray(px).mean(), 0.0, 1.0)
    gray = _gray(px)[..., None]
    px = np.clip(gray + (px - gray) * s, 0.0, 1.0)
    if hue != 0.0:
        hsv = _rgb_to_hsv(px)
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        px = _hsv_to_rgb(hsv)
    return px


def _rescale(px, fy, fx):
    h, w = px.shape[:2]
    zoomed = ndimage.zoom(px, (fy, fx, 1.0), order=1, mode="nearest", grid_mode=True)
    zh, zw = zoomed.shape[:2]
    pad_y, pad_x = max(h - zh, 0), max(w - zw, 0)
    if pad_y or pad_x:
        zoomed = np.pad(zoomed, ((pad_y // 2, pad_y - pad_y // 2), (pad_x // 2, pad_x - pad_x // 2), (0, 0)), mode="edge")
        zh, zw = zoomed.shape[:2]
    y, x = (zh - h) // 2, (zw - w) // 2
    return zoomed[y : y + h, x : x + w]


def augment(patch: Patch, cfg: AugConfig, rng: np.random.Generator) -> Patch:
    """Apply the configured random transforms in a fixed order; output stays in [0, 1]."""
    if cfg.crop_size is not None:
        patch = random_crop(patch, cfg.crop_size, rng)
    px = np.asarray(patch.pixels, dtype=np.float64)
    touched = False
    if rng.random() < cfg.scale_p:
        fy, fx = rng.uniform(1 - cfg.scale_range, 1 + cfg.scale_range, size=2)
        px = _rescale(px, fy, fx)
        touched = True
    if rng.random() < cfg.hflip_p:
        px = px[:, ::-1]
        touched = True
    if rng.random() < cfg.vflip_p:
        px = px[::-1, :]
        touched = True
    if rng.random() < cfg.jitter_p:
        px = _color_jitter(px, cfg, rng)
        touched = True
    if rng.random() < cfg.channel_p:
        px = px * rng.uniform(1 - cfg.channel_scale, 1 + cfg.channel_scale, size=3)
        touched = True
    if rng.random() < cfg.blur_p:
        sigma = rng.uniform(*cfg.blur_sigma)
        if sigma > 0:
            px = ndimage.gaussian_filter(px, sigma=(sigma, sigma, 0.0), mode="reflect")
        touched = True
    if not touched and cfg.crop_size is None:
        return patch.with_pixels(patch.pixels.copy())
    return patch.with_pixels(np.ascontiguousarray(np.clip(px, 0.0, 1.0)))


def color_correct(image: LabeledImage) -> LabeledImage:
    """Gray-world white balance: scale each channel so its mean equals the overall mean."""
    px = np.asarray(image.pixels, dtype=np.float64)
    means = px.reshape(-1, 3).mean(axis=0)
    overall = means.mean()
    if overall <= 0:
        return LabeledImage(px.copy(), image.label, image.source_id)
    gains = np.where(means > 0, overall / np.where(means > 0, means, 1.0), 1.0)
    return LabeledImage(np.clip(px * gains, 0.0, 1.0), image.label, image.source_id)


# ---------------------------------------------------------------- mask files


def mask_filename(source_id: str) -> str:
    stem = source_id.replace("\\", "/").replace("/", "__")
    return f"{Path(stem).stem if '.' in stem else stem}.json"


def save_mask_json(mask: ClassMask, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(mask.to_dict(), separators=(",", ":")) + "\n", encoding="utf-8")


def load_mask_json(path: str | os.PathLike) -> ClassMask:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return ClassMask.from_dict(data)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"bad mask file {path}: {exc}") from exc


def render_mask_png(mask: ClassMask, path: str | os.PathLike, cell: tuple[int, int] = (32, 32)) -> None:
    """Write the label grid as a palette-coloured RGB PNG, one flat block per cell."""
    labels = np.asarray(mask.labels)
    if labels.max(initial=0) >= len(PALETTE):
        raise ValueError(f"no palette colour for class {labels.max()}")
    rgb = PALETTE[labels]
    rgb = np.repeat(np.repeat(rgb, cell[0], axis=0), cell[1], axis=1)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG", optimize=False)
