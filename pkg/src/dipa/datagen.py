"""Synthetic confounded dataset: per-class textured shapes over
backgrounds that are class-predictive with probability confound_strength.
Masks are exact (inequality rasterization, no antialiasing) so the
simulated user's verdicts are unambiguous. Also ingests any folder in
the same train/test/class layout.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SPLITS = ("train", "test")


@dataclass
class SyntheticSpec:
    classes: int = 6
    train_per_class: int = 120
    test_per_class: int = 40
    image_size: tuple[int, int] = (64, 64)          # H, W
    confound_strength: float = 0.9                  # P(class background | class)
    object_scale: tuple[float, float] = (0.32, 0.42)  # radius as fraction of min dim

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.object_scale = tuple(self.object_scale)
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if not 0.0 <= self.confound_strength <= 1.0:
            raise ValueError("confound_strength must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "image_size": list(self.image_size),
            "confound_strength": self.confound_strength,
            "object_scale": list(self.object_scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(classes=d["classes"], train_per_class=d["train_per_class"],
                   test_per_class=d["test_per_class"],
                   image_size=tuple(d["image_size"]),
                   confound_strength=d["confound_strength"],
                   object_scale=tuple(d["object_scale"]))


@dataclass
class SplitData:
    images: np.ndarray          # (M, 3, H, W) float32 in [0, 1]
    labels: np.ndarray          # (M,) int
    masks: np.ndarray           # (M, H, W) bool, True = object pixel
    ids: np.ndarray             # (M,) int, stable per-split sample ids

    def __len__(self):
        return len(self.images)


@dataclass
class DatasetBundle:
    train: SplitData
    test: SplitData
    class_names: list[str]
    manifest: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def manifest_hash(self) -> str:
        blob = json.dumps(self.manifest, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# -- shape rasterizers (exact, aliased on purpose) ---------------------------

def _coords(h, w):
    return np.mgrid[0:h, 0:w].astype(np.float64)


def _shape_mask(kind: int, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    y, x = _coords(h, w)
    dy, dx = y - cy, x - cx
    kind = kind % 6
    if kind == 0:    # circle
        return dy * dy + dx * dx <= r * r
    if kind == 1:    # square
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if kind == 2:    # upward triangle
        top = cy - r
        half = (y - top) / 2.0
        return (y >= top) & (y <= cy + r) & (np.abs(dx) <= half)
    if kind == 3:    # wide ellipse
        return (dx / (1.3 * r)) ** 2 + (dy / (0.65 * r)) ** 2 <= 1.0
    if kind == 4:    # diamond
        return np.abs(dy) + np.abs(dx) <= r
    # cross
    arm = r / 2.8
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | \
           ((np.abs(dy) <= arm) & (np.abs(dx) <= r))


# -- procedural textures ------------------------------------------------------

def _stripes(h, w, period, angle, c0, c1, phase):
    y, x = _coords(h, w)
    t = np.cos(angle) * x + np.sin(angle) * y + phase
    sel = (np.floor(t / period).astype(int) % 2) == 0
    return np.where(sel[..., None], c0, c1)


def _checker(h, w, period, c0, c1, phase):
    y, x = _coords(h, w)
    sel = ((np.floor((x + phase) / period) + np.floor((y + phase) / period)).astype(int) % 2) == 0
    return np.where(sel[..., None], c0, c1)


def _dots(h, w, period, radius, c0, c1, phase):
    y, x = _coords(h, w)
    yy = (y + phase) % period - period / 2
    xx = (x + phase) % period - period / 2
    sel = yy * yy + xx * xx <= radius * radius
    return np.where(sel[..., None], c1, c0)


def _noise(h, w, base, amp, rng):
    out = np.tile(np.asarray(base, dtype=np.float64), (h, w, 1))
    for octave in (8, 4):
        small = rng.random((h // octave + 2, w // octave + 2, 3))
        big = np.kron(small, np.ones((octave, octave, 1)))[:h, :w]
        out += amp * (big - 0.5)
    return out


def _rings(h, w, cy, cx, period, c0, c1):
    y, x = _coords(h, w)
    rr = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
    sel = (np.floor(rr / period).astype(int) % 2) == 0
    return np.where(sel[..., None], c0, c1)


def _object_texture(class_id, h, w, cy, cx, rng):
    phase = float(rng.integers(0, 8))
    k = class_id % 6
    if k == 0:
        return _stripes(h, w, 4, np.pi / 2, (0.95, 0.15, 0.10), (0.98, 0.85, 0.10), phase)
    if k == 1:
        return _stripes(h, w, 4, 0.0, (0.10, 0.75, 0.20), (0.95, 0.95, 0.95), phase)
    if k == 2:
        return _checker(h, w, 4, (0.10, 0.25, 0.90), (0.98, 0.55, 0.10), phase)
    if k == 3:
        return _dots(h, w, 4, 1.6, (0.85, 0.10, 0.80), (0.10, 0.90, 0.90), phase)
    if k == 4:
        return _stripes(h, w, 5, np.pi / 4, (0.12, 0.12, 0.30), (0.90, 0.90, 0.98), phase)
    return _checker(h, w, 3, (0.55, 0.10, 0.85), (0.95, 0.80, 0.30), phase)


def _background_texture(class_id, h, w, rng):
    """class_id None means the shared neutral background. Backgrounds stay
    in one subdued colour family and are coarser than object textures so
    they confound the label without dominating the latent space."""
    if class_id is None:
        return _noise(h, w, (0.52, 0.52, 0.52), 0.06, rng)
    phase = float(rng.integers(0, 12))
    k = class_id % 6
    lo, hi = (0.48, 0.49, 0.47), (0.58, 0.59, 0.56)
    if k == 0:
        return _stripes(h, w, 10, np.pi / 3, lo, hi, phase)
    if k == 1:
        return _checker(h, w, 11, lo, hi, phase)
    if k == 2:
        return _noise(h, w, (0.50, 0.54, 0.54), 0.12, rng)
    if k == 3:
        return _stripes(h, w, 9, 0.0, lo, hi, phase)
    if k == 4:
        return _dots(h, w, 12, 4.0, lo, hi, phase)
    return _stripes(h, w, 10, np.pi / 2, lo, hi, phase)


# per-shape radius multipliers that equalize pixel area across shapes
# (relative to the circle); thin shapes would otherwise attract far fewer
# prototypes than blocky ones
_AREA_NORM = {0: 1.0, 1: 0.886, 2: 1.254, 3: 1.088, 4: 1.254, 5: 1.157}


def _render_sample(spec: SyntheticSpec, class_id: int, rng: np.random.Generator):
    h, w = spec.image_size
    lo, hi = spec.object_scale
    r = float(rng.uniform(lo, hi)) * min(h, w)
    r = min(r * _AREA_NORM[class_id % 6], (min(h, w) - 6) / 2.0)
    if 2 * r + 4 > min(h, w):
        raise ValueError(f"object radius {r:.1f} does not fit {h}x{w} image")
    margin = r + 2
    cy = float(rng.uniform(margin, h - margin))
    cx = float(rng.uniform(margin, w - margin))
    mask = _shape_mask(class_id, h, w, cy, cx, r)
    use_class_bg = bool(rng.random() < spec.confound_strength)
    bg = _background_texture(class_id if use_class_bg else None, h, w, rng)
    obj = _object_texture(class_id, h, w, cy, cx, rng)
    img = np.where(mask[..., None], obj, bg)
    img = np.clip(img, 0.0, 1.0)
    return (img * 255.0 + 0.5).astype(np.uint8), mask


# -- disk IO -------------------------------------------------------------------

def class_dir_name(k: int) -> str:
    return f"class_{k:02d}"


def generate(spec: SyntheticSpec, seed: int, root: str | Path) -> dict:
    """Render the dataset to root/{train,test}/{class}/img_*.png with mask
    mirrors under root/masks, plus a dataset.json manifest. Deterministic:
    every sample's RNG derives from (seed, split, class, index)."""
    root = Path(root)
    checksums: dict[str, str] = {}
    counts = {"train": spec.train_per_class, "test": spec.test_per_class}
    for split_idx, split in enumerate(SPLITS):
        for k in range(spec.classes):
            img_dir = root / split / class_dir_name(k)
            msk_dir = root / "masks" / split / class_dir_name(k)
            img_dir.mkdir(parents=True, exist_ok=True)
            msk_dir.mkdir(parents=True, exist_ok=True)
            for i in range(counts[split]):
                rng = np.random.default_rng([seed, split_idx, k, i])
                img, mask = _render_sample(spec, k, rng)
                name = f"img_{i:04d}.png"
                Image.fromarray(img).save(img_dir / name)
                Image.fromarray((mask * np.uint8(255))).save(msk_dir / name)
                for p in (img_dir / name, msk_dir / name):
                    rel = str(p.relative_to(root))
                    checksums[rel] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {
        "spec": spec.to_dict(),
        "seed": seed,
        "classes": [class_dir_name(k) for k in range(spec.classes)],
        "counts": counts,
        "checksums": checksums,
    }
    (root / "dataset.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def _load_image(path: Path, size_hw: tuple[int, int] | None) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if size_hw is not None and img.size != (size_hw[1], size_hw[0]):
        img = img.resize((size_hw[1], size_hw[0]), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _load_mask(path: Path, size_hw: tuple[int, int] | None) -> np.ndarray:
    img = Image.open(path).convert("L")
    if size_hw is not None and img.size != (size_hw[1], size_hw[0]):
        img = img.resize((size_hw[1], size_hw[0]), Image.NEAREST)
    return np.asarray(img) > 0


def ingest(root: str | Path, target_hw: tuple[int, int] | None = None) -> DatasetBundle:
    """Load a train/test/class folder tree. Class ids follow lexicographic
    folder order; images are resized bilinearly, masks nearest-neighbour.
    Every image must have a mask mirror under root/masks."""
    root = Path(root)
    train_dir = root / "train"
    if not train_dir.is_dir():
        raise FileNotFoundError(f"no train/ directory under {root}")
    class_names = sorted(p.name for p in train_dir.iterdir() if p.is_dir())
    if not class_names:
        raise FileNotFoundError(f"no class folders under {train_dir}")
    label_of = {name: i for i, name in enumerate(class_names)}

    splits = {}
    for split in SPLITS:
        images, labels, masks, ids = [], [], [], []
        next_id = 0
        for name in class_names:
            cdir = root / split / name
            if not cdir.is_dir():
                continue
            for img_path in sorted(cdir.glob("*.png")):
                mask_path = root / "masks" / split / name / img_path.name
                if not mask_path.exists():
                    raise FileNotFoundError(f"missing mask for {img_path}: {mask_path}")
                images.append(_load_image(img_path, target_hw))
                masks.append(_load_mask(mask_path, target_hw))
                labels.append(label_of[name])
                ids.append(next_id)
                next_id += 1
        if not images:
            raise FileNotFoundError(f"no images found under {root / split}")
        splits[split] = SplitData(
            images=np.stack(images), labels=np.array(labels, dtype=np.int64),
            masks=np.stack(masks), ids=np.array(ids, dtype=np.int64))

    manifest_path = root / "dataset.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    return DatasetBundle(train=splits["train"], test=splits["test"],
                         class_names=class_names, manifest=manifest)
