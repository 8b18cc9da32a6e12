"""Prototypical-part model: conv encoder to a latent grid, prototype
distances, evidence maps, max-evidence classification head, prototype
push, and the patch geometry that ties latent cells back to pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value

DEFAULT_EPS = 1e-4


class MaskExhaustedClass(Exception):
    """Raised when masking would leave (or has left) a class without any
    active prototype."""

    def __init__(self, class_id: int):
        super().__init__(f"all prototypes of class {class_id} are inactive")
        self.class_id = class_id


@dataclass
class EncoderConfig:
    input_size: tuple[int, int, int] = (64, 64, 3)          # H, W, C
    conv_blocks: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (32, 2), (32, 1))
    latent_grid: tuple[int, int] = (7, 7)
    latent_dim: int = 32
    final_activation: str = "sigmoid"

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.conv_blocks = tuple(tuple(b) for b in self.conv_blocks)
        self.latent_grid = tuple(self.latent_grid)
        if self.conv_blocks[-1][0] != self.latent_dim:
            raise ValueError("last conv block channels must equal latent_dim")
        if self.final_activation != "sigmoid":
            raise ValueError(f"unsupported final_activation {self.final_activation!r}")

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "conv_blocks": [list(b) for b in self.conv_blocks],
            "latent_grid": list(self.latent_grid),
            "latent_dim": self.latent_dim,
            "final_activation": self.final_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            input_size=tuple(d["input_size"]),
            conv_blocks=tuple(tuple(b) for b in d["conv_blocks"]),
            latent_grid=tuple(d["latent_grid"]),
            latent_dim=d["latent_dim"],
            final_activation=d["final_activation"],
        )


class Encoder:
    """Stack of 3x3 conv blocks, adaptive mean pool to the latent grid,
    sigmoid squash so every latent component lands in [0, 1]."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng or np.random.default_rng(0)
        self.weights: list[Value] = []
        self.biases: list[Value] = []
        c_in = config.input_size[2]
        for c_out, _stride in config.conv_blocks:
            scale = np.sqrt(2.0 / (c_in * 9))
            w = rng.normal(0.0, scale, size=(c_out, c_in, 3, 3)).astype(np.float32)
            self.weights.append(Value(w))
            self.biases.append(Value(np.zeros(c_out, dtype=np.float32)))
            c_in = c_out

    def parameters(self) -> list[Value]:
        return [*self.weights, *self.biases]

    def __call__(self, images) -> Value:
        cfg = self.config
        x = images if isinstance(images, Value) else Value(images)
        H, W, C = cfg.input_size
        if x.ndim != 4 or x.shape[1:] != (C, H, W):
            raise ValueError(
                f"encoder expects (B, {C}, {H}, {W}) images, got {tuple(x.shape)}")
        n_blocks = len(cfg.conv_blocks)
        for i, (_c, stride) in enumerate(cfg.conv_blocks):
            x = ad.conv2d(x, self.weights[i], self.biases[i], stride=stride, padding=1)
            if i < n_blocks - 1:
                x = x.relu()
        x = ad.adaptive_avg_pool2d(x, cfg.latent_grid)
        return x.sigmoid()


@dataclass
class PrototypeSet:
    """N latent vectors with class assignments and an active mask."""

    vectors: Value                 # (N, D), kept in [0, 1]
    class_of: np.ndarray           # (N,) int32
    active: np.ndarray             # (N,) bool
    per_class: int = 5

    @classmethod
    def init_random(cls, n_classes: int, per_class: int, latent_dim: int,
                    rng: np.random.Generator | None = None) -> "PrototypeSet":
        rng = rng or np.random.default_rng(0)
        n = n_classes * per_class
        vectors = Value(rng.uniform(0.0, 1.0, size=(n, latent_dim)).astype(np.float32))
        class_of = np.repeat(np.arange(n_classes, dtype=np.int32), per_class)
        return cls(vectors=vectors, class_of=class_of,
                   active=np.ones(n, dtype=bool), per_class=per_class)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.class_of.max()) + 1

    def ids_of_class(self, class_id: int) -> np.ndarray:
        return np.nonzero(self.class_of == class_id)[0]

    def check_classes_covered(self):
        for k in range(self.n_classes):
            if not self.active[self.class_of == k].any():
                raise MaskExhaustedClass(k)

    def deactivate(self, ids) -> None:
        """Mask prototypes; refuses to wipe out an entire class."""
        ids = np.asarray(list(ids), dtype=int)
        if ids.size == 0:
            return
        if ids.min() < 0 or ids.max() >= self.n:
            raise IndexError(f"prototype id out of range: {ids}")
        proposed = self.active.copy()
        proposed[ids] = False
        for k in range(self.n_classes):
            if not proposed[self.class_of == k].any():
                raise MaskExhaustedClass(k)
        self.active = proposed


@dataclass
class HeadWeights:
    """Linear map from N max-evidence values to K class logits (no bias)."""

    w: Value  # (N, K)

    @classmethod
    def init_connected(cls, class_of: np.ndarray, n_classes: int,
                       on_class: float = 1.0, off_class: float = -0.5) -> "HeadWeights":
        n = len(class_of)
        w = np.full((n, n_classes), off_class, dtype=np.float32)
        w[np.arange(n), class_of] = on_class
        return cls(w=Value(w))


@dataclass
class EvidenceMap:
    """Per-prototype similarity heatmaps plus their per-map maximum."""

    scores: Value              # (B, N, Hg, Wg)
    max_scores: Value          # (B, N)
    argmax_cell: np.ndarray    # (B, N, 2) int


@dataclass
class PushEntry:
    prototype_id: int
    image_id: int
    cell: tuple[int, int]
    distance_moved: float


@dataclass
class PushReport:
    entries: list[PushEntry] = field(default_factory=list)

    def by_prototype(self) -> dict[int, PushEntry]:
        return {e.prototype_id: e for e in self.entries}


def prototype_distances(grid: Value, protos: PrototypeSet,
                        coincidence_escape: bool = False) -> Value:
    """Squared L2 distance from every prototype to every grid cell.

    grid: (B, D, Hg, Wg) -> (B, N, Hg, Wg)
    """
    B, D, Hg, Wg = grid.shape
    if D != protos.latent_dim:
        raise ad.ShapeError("prototype_distances", grid.shape, protos.vectors.shape)
    flat = grid.transpose(0, 2, 3, 1).reshape(B * Hg * Wg, D)
    d = ad.pairwise_sqdist(flat, protos.vectors, coincidence_escape=coincidence_escape)
    return d.reshape(B, Hg, Wg, protos.n).transpose(0, 3, 1, 2)


def evidence(distances: Value, eps: float = DEFAULT_EPS) -> EvidenceMap:
    """Similarity log((d + 1) / (d + eps)); monotone decreasing in d,
    maximal log(1/eps) at d = 0."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    B, N, Hg, Wg = distances.shape
    scores = ((distances + 1.0) / (distances + np.float32(eps))).log()
    flat = scores.reshape(B, N, Hg * Wg)
    max_scores, idx = ad.max_with_argmax(flat, axis=2)
    cells = np.stack(np.unravel_index(idx, (Hg, Wg)), axis=-1)
    return EvidenceMap(scores=scores, max_scores=max_scores, argmax_cell=cells)


def classify(emap: EvidenceMap, head: HeadWeights, protos: PrototypeSet) -> Value:
    """logit[k] = sum_n active[n] * w[n, k] * max-evidence[n]."""
    protos.check_classes_covered()
    mask = Value(protos.active.astype(np.float32))
    return (emap.max_scores * mask) @ head.w


def patch_region(cell: tuple[int, int], grid_hw: tuple[int, int],
                 image_hw: tuple[int, int]) -> tuple[int, int, int, int]:
    """Pixel rectangle (r0, r1, c0, c1) the latent cell upscales to."""
    i, j = cell
    Hg, Wg = grid_hw
    H, W = image_hw
    if not (0 <= i < Hg and 0 <= j < Wg):
        raise ValueError(f"cell {cell} outside grid {grid_hw}")
    r0 = (i * H) // Hg
    r1 = -((-(i + 1) * H) // Hg)   # ceil((i+1)*H/Hg)
    c0 = (j * W) // Wg
    c1 = -((-(j + 1) * W) // Wg)
    return r0, r1, c0, c1


def upsample_heatmap(scores: np.ndarray, image_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear upsample of one prototype's grid scores to pixel space.

    Half-pixel-centre convention so a single-hot cell peaks at the centre
    of its upscaled block. Visualization only (75%-of-max thresholding).
    """
    src = np.asarray(scores, dtype=np.float32)
    sh, sw = src.shape
    H, W = image_hw
    ys = np.clip((np.arange(H) + 0.5) * sh / H - 0.5, 0.0, sh - 1.0)
    xs = np.clip((np.arange(W) + 0.5) * sw / W - 0.5, 0.0, sw - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    fy = (ys - y0).astype(np.float32)[:, None]
    fx = (xs - x0).astype(np.float32)[None, :]
    out = (src[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
           + src[np.ix_(y0, x1)] * (1 - fy) * fx
           + src[np.ix_(y1, x0)] * fy * (1 - fx)
           + src[np.ix_(y1, x1)] * fy * fx)
    return out


def threshold_region(heatmap: np.ndarray, fraction: float = 0.75) -> np.ndarray:
    """Boolean mask of pixels at or above fraction * max."""
    hm = np.asarray(heatmap)
    return hm >= fraction * hm.max()


class ProtoPartModel:
    """Encoder + prototypes + head, wired per the evidence-max pipeline."""

    def __init__(self, config: EncoderConfig | None = None, n_classes: int = 6,
                 per_class: int = 5, eps: float = DEFAULT_EPS, seed: int = 0):
        self.config = config or EncoderConfig()
        self.n_classes = n_classes
        self.eps = eps
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.config, rng)
        self.prototypes = PrototypeSet.init_random(
            n_classes, per_class, self.config.latent_dim, rng)
        self.head = HeadWeights.init_connected(self.prototypes.class_of, n_classes)

    # -- parameter groups ---------------------------------------------
    def encoder_params(self) -> list[Value]:
        return self.encoder.parameters()

    def prototype_params(self) -> list[Value]:
        return [self.prototypes.vectors]

    def head_params(self) -> list[Value]:
        return [self.head.w]

    def all_params(self) -> list[Value]:
        return self.encoder_params() + self.prototype_params() + self.head_params()

    # -- forward pieces -------------------------------------------------
    def encode(self, images) -> Value:
        x = images if isinstance(images, Value) else Value(images)
        lo, hi = float(x.data.min(initial=0.0)), float(x.data.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"image values must lie in [0, 1], got [{lo}, {hi}]")
        return self.encoder(x)

    def forward(self, images) -> tuple[Value, EvidenceMap, Value]:
        grid = self.encode(images)
        d = prototype_distances(grid, self.prototypes)
        emap = evidence(d, self.eps)
        logits = classify(emap, self.head, self.prototypes)
        return logits, emap, grid

    def predict(self, images, batch_size: int = 64) -> np.ndarray:
        """Class predictions without building graphs."""
        outs = []
        with ad.no_grad():
            for i in range(0, len(images), batch_size):
                logits, _, _ = self.forward(images[i:i + batch_size])
                outs.append(np.argmax(logits.data, axis=1))
        return np.concatenate(outs) if outs else np.empty(0, dtype=int)

    def accuracy(self, images, labels, batch_size: int = 64) -> float:
        pred = self.predict(images, batch_size)
        return float(np.mean(pred == np.asarray(labels)))

    # -- push -----------------------------------------------------------
    def encode_dataset(self, images, batch_size: int = 64) -> np.ndarray:
        """(M, 3, H, W) -> latent grids (M, Hg, Wg, D), graph-free."""
        grids = []
        with ad.no_grad():
            for i in range(0, len(images), batch_size):
                g = self.encode(images[i:i + batch_size])
                grids.append(g.data.transpose(0, 2, 3, 1))
        return np.concatenate(grids, axis=0)

    def push(self, images, labels, image_ids=None, batch_size: int = 64) -> PushReport:
        """Move every active prototype onto the nearest grid-cell encoding
        of its own class (bit-exact copy). Deterministic: ties resolve to
        the lowest (image id, cell index)."""
        labels = np.asarray(labels)
        if image_ids is None:
            image_ids = np.arange(len(images))
        image_ids = np.asarray(image_ids)
        Hg, Wg = self.config.latent_grid
        report = PushReport()
        grids = self.encode_dataset(images, batch_size)          # (M, Hg, Wg, D)
        for k in range(self.n_classes):
            members = np.nonzero(labels == k)[0]
            if members.size == 0:
                raise ValueError(f"push: class {k} has no training images")
            order = members[np.argsort(image_ids[members], kind="stable")]
            z = grids[order].reshape(-1, self.config.latent_dim)   # (m*Hg*Wg, D)
            z64 = z.astype(np.float64)
            zz = np.einsum("md,md->m", z64, z64)
            for j in self.prototypes.ids_of_class(k):
                if not self.prototypes.active[j]:
                    continue
                p = self.prototypes.vectors.data[j].astype(np.float64)
                d = zz - 2.0 * (z64 @ p) + p @ p
                best = int(np.argmin(d))                            # lowest flat index on ties
                img_pos, cell_flat = divmod(best, Hg * Wg)
                old = self.prototypes.vectors.data[j].copy()
                new = z[best]
                self.prototypes.vectors.data[j] = new
                report.entries.append(PushEntry(
                    prototype_id=int(j),
                    image_id=int(image_ids[order[img_pos]]),
                    cell=tuple(int(c) for c in np.unravel_index(cell_flat, (Hg, Wg))),
                    distance_moved=float(np.linalg.norm(old.astype(np.float64) - new)),
                ))
        report.entries.sort(key=lambda e: e.prototype_id)
        return report
