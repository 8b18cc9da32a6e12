"""Simulated user: verdicts from pixel-wise ground truth.

A prototype is non-object when the image patch of its push-source grid
cell contains zero object pixels. Verdicts depend only on (source image,
cell), never on latent values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PrototypeSet, PushReport, patch_region


class ConsultUnavailable(Exception):
    """Raised by a verdict provider that cannot answer right now; the
    training session suspends and can be resumed later."""


@dataclass
class OverlapStat:
    prototype_id: int
    source_image: int
    cell: tuple[int, int]
    object_fraction: float


def object_fraction(cell: tuple[int, int], image_id: int, masks: np.ndarray,
                    grid_hw: tuple[int, int]) -> float:
    """Fraction of object pixels inside the cell's upscaled patch."""
    if image_id < 0 or image_id >= len(masks):
        raise KeyError(f"no ground-truth mask for image {image_id}")
    mask = masks[image_id]
    r0, r1, c0, c1 = patch_region(cell, grid_hw, mask.shape)
    return float(mask[r0:r1, c0:c1].mean())


def is_non_object(cell: tuple[int, int], image_id: int, masks: np.ndarray,
                  grid_hw: tuple[int, int]) -> bool:
    """True iff not a single ground-truth pixel in the patch is object."""
    return object_fraction(cell, image_id, masks, grid_hw) == 0.0


def overlap_stats(protos: PrototypeSet, report: PushReport, masks: np.ndarray,
                  grid_hw: tuple[int, int]) -> list[OverlapStat]:
    by_proto = report.by_prototype()
    stats = []
    for j in range(protos.n):
        if not protos.active[j] or j not in by_proto:
            continue
        e = by_proto[j]
        frac = object_fraction(e.cell, e.image_id, masks, grid_hw)
        stats.append(OverlapStat(prototype_id=j, source_image=e.image_id,
                                 cell=e.cell, object_fraction=frac))
    return stats


def overlap_histogram(stats: list[OverlapStat], bins: int = 10) -> dict:
    """Binned object_fraction counts plus the count at the 75% threshold."""
    fracs = np.array([s.object_fraction for s in stats], dtype=np.float64)
    counts, edges = np.histogram(fracs, bins=bins, range=(0.0, 1.0))
    return {
        "bin_edges": edges.tolist(),
        "counts": counts.tolist(),
        "total": len(stats),
        "at_least_75": int(np.count_nonzero(fracs >= 0.75)),
        "zero_overlap": int(np.count_nonzero(fracs == 0.0)),
    }


def consult(protos: PrototypeSet, report: PushReport, masks: np.ndarray,
            grid_hw: tuple[int, int]) -> dict[int, bool]:
    """Verdict for every active prototype; True marks non-object."""
    verdicts = {}
    by_proto = report.by_prototype()
    for j in range(protos.n):
        if not protos.active[j]:
            continue
        if j not in by_proto:
            raise ValueError(f"prototype {j} has no push source; push before consulting")
        e = by_proto[j]
        verdicts[int(j)] = is_non_object(e.cell, e.image_id, masks, grid_hw)
    return verdicts


class OracleUser:
    """Verdict provider backed by ground-truth masks; same interface the
    web UI drives (a callable of (protos, push_report) -> verdict dict)."""

    def __init__(self, masks: np.ndarray, grid_hw: tuple[int, int]):
        self.masks = masks
        self.grid_hw = tuple(grid_hw)

    def __call__(self, protos: PrototypeSet, report: PushReport) -> dict[int, bool]:
        return consult(protos, report, self.masks, self.grid_hw)
