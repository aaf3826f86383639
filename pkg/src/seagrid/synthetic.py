"""Synthetic image-level-labelled collections with known patch-level truth.

Background patches are sand coloured; each seagrass class is a green hue with
its own stripe texture. Seagrass images carry a fixed fraction of planted
background patches, so their patch truth differs from the image label.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset_io import GridSpec, LabeledImage

SAND = (0.80, 0.70, 0.50)
FISH = (0.75, 0.78, 0.80)
SPECIES = (
    # base colour, stripe period, stripe orientation (0 rows, 1 cols)
    ((0.15, 0.65, 0.20), 2, 1),
    ((0.25, 0.60, 0.10), 4, 0),
    ((0.10, 0.55, 0.25), 8, 1),
)
DEFAULT_NAMES = ("Background", "Ferny", "Rounded", "Strappy")


@dataclass
class SyntheticSet:
    images: list[LabeledImage]
    truth: dict[str, np.ndarray]  # source_id -> rows×cols patch labels
    grid: GridSpec
    class_names: list[str]

    def patch_truth(self) -> np.ndarray:
        """Row-major patch truth, concatenated in image order."""
        return np.concatenate([self.truth[im.source_id].ravel() for im in self.images])

    def planted_mask(self) -> np.ndarray:
        """True for background patches inside seagrass-labelled images."""
        out = []
        for im in self.images:
            t = self.truth[im.source_id].ravel()
            out.append((t == 0) & (im.label != 0))
        return np.concatenate(out)


def _patch(kind: int, size: tuple[int, int], rng, noise: float) -> np.ndarray:
    h, w = size
    if kind == 0:
        base = np.broadcast_to(np.array(SAND), (h, w, 3)).copy()
        base += rng.normal(0, 0.03, size=(h, w, 1))
    elif kind == -1:
        base = np.broadcast_to(np.array(FISH), (h, w, 3)).copy()
        scales = ((np.arange(h)[:, None] + np.arange(w)[None, :]) % 3 == 0) * 0.15
        base += scales[..., None]
    else:
        color, period, axis = SPECIES[(kind - 1) % len(SPECIES)]
        base = np.broadcast_to(np.array(color), (h, w, 3)).copy()
        idx = np.arange(h if axis == 0 else w)
        stripe = ((idx // max(period // 2, 1)) % 2) * 0.12 - 0.06
        stripe = stripe[:, None] if axis == 0 else stripe[None, :]
        base = base + np.broadcast_to(stripe, (h, w))[..., None] * np.array([0.5, 1.0, 0.5])
    base += rng.normal(0, noise, size=base.shape)
    return np.clip(base, 0.0, 1.0)


def make_dataset(
    n_per_class: int = 40,
    grid: GridSpec = GridSpec(3, 4),
    patch_size: tuple[int, int] = (16, 16),
    n_classes: int = 4,
    planted_fraction: float = 0.25,
    fish_fraction: float = 0.0,
    noise: float = 0.04,
    seed: int = 0,
    prefix: str = "",
) -> SyntheticSet:
    """``n_per_class`` images per class; class 0 images are all background.

    ``fish_fraction`` plants fish-coloured patches (truth id ``n_classes``)
    into seagrass images for the outlier setting.
    """
    rng = np.random.default_rng(seed)
    names = list(DEFAULT_NAMES[:n_classes]) if n_classes <= len(DEFAULT_NAMES) else [f"class{i}" for i in range(n_classes)]
    n_cells = grid.size
    n_planted = int(round(planted_fraction * n_cells))
    n_fish = int(round(fish_fraction * n_cells))
    images, truth = [], {}
    ph, pw = patch_size
    for c in range(n_classes):
        for k in range(n_per_class):
            cells = np.full(n_cells, c, dtype=np.int64)
            if c != 0:
                pick = rng.permutation(n_cells)
                cells[pick[:n_planted]] = 0
                cells[pick[n_planted : n_planted + n_fish]] = n_classes
            px = np.zeros((grid.rows * ph, grid.cols * pw, 3))
            for i, kind in enumerate(cells):
                r, col = divmod(i, grid.cols)
                px[r * ph : (r + 1) * ph, col * pw : (col + 1) * pw] = _patch(-1 if kind == n_classes else int(kind), patch_size, rng, noise)
            sid = f"{prefix}{names[c]}/img{k:03d}.png"
            images.append(LabeledImage(px, c, sid))
            truth[sid] = cells.reshape(grid.rows, grid.cols)
    return SyntheticSet(images, truth, grid, names)


def write_dataset(data: SyntheticSet, root, truth_dir=None) -> None:
    """Write PNGs under ``root/<ClassName>/`` plus ``classes.txt``; optionally truth masks as JSON."""
    from pathlib import Path

    from PIL import Image

    from .dataset_io import ClassMask, mask_filename, save_mask_json

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("\n".join(data.class_names) + "\n", encoding="utf-8")
    for im in data.images:
        path = root / im.source_id
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(im.pixels * 255).astype(np.uint8), mode="RGB").save(path, format="PNG")
    if truth_dir is not None:
        truth_dir = Path(truth_dir)
        truth_dir.mkdir(parents=True, exist_ok=True)
        for im in data.images:
            labels = data.truth[im.source_id]
            probs = np.eye(int(labels.max()) + 1)[labels]
            save_mask_json(ClassMask(labels, probs, im.source_id), truth_dir / mask_filename(im.source_id))
