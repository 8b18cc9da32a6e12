"""Loss terms for prototype training and deselection.

The combined objective is

    L = CrsEnt + l_clst*Clst + l_sep*Sep + l_l1*L1 + l_reject*Reject + l_con*Con

where Reject repels prototypes from user-rejected latent vectors
(antitypes) and Con keeps prototype components inside [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .model import DEFAULT_EPS, PrototypeSet, HeadWeights, prototype_distances

REJECT_REDUCTIONS = ("antitype_max", "prototype_max", "global_max")


@dataclass
class LossWeights:
    lambda_clst: float = 0.8
    lambda_sep: float = 0.08
    lambda_l1: float = 1e-4        # applied in the last-layer phase only
    lambda_reject: float = 0.5
    lambda_con: float = 1.0
    eps: float = DEFAULT_EPS
    reject_reduction: str = "antitype_max"

    def __post_init__(self):
        for name in ("lambda_clst", "lambda_sep", "lambda_l1", "lambda_reject", "lambda_con"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.reject_reduction not in REJECT_REDUCTIONS:
            raise ValueError(f"unknown reject_reduction {self.reject_reduction!r}")

    def to_dict(self) -> dict:
        return {
            "lambda_clst": self.lambda_clst, "lambda_sep": self.lambda_sep,
            "lambda_l1": self.lambda_l1, "lambda_reject": self.lambda_reject,
            "lambda_con": self.lambda_con, "eps": self.eps,
            "reject_reduction": self.reject_reduction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass
class AntitypeSet:
    """Frozen copies of rejected prototype vectors. Append-only: rounds
    may add antitypes but never remove or alter existing ones."""

    vectors: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 0), dtype=np.float32))
    provenance: list[tuple[int, int]] = field(default_factory=list)  # (round, prototype id)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        self.provenance = [tuple(int(x) for x in p) for p in self.provenance]

    def __len__(self) -> int:
        return 0 if self.vectors.size == 0 else self.vectors.shape[0]

    def add(self, vectors: np.ndarray, round_index: int, prototype_ids) -> int:
        """Append copies of the given vectors; returns how many were added."""
        vectors = np.array(vectors, dtype=np.float32, copy=True)
        if vectors.ndim != 2:
            raise ValueError("antitype vectors must be (S, D)")
        if len(self) == 0:
            self.vectors = vectors
        else:
            if vectors.shape[1] != self.vectors.shape[1]:
                raise ValueError("latent dim mismatch")
            self.vectors = np.concatenate([self.vectors, vectors], axis=0)
        self.provenance.extend(
            (int(round_index), int(pid)) for pid in prototype_ids)
        return vectors.shape[0]


def reject_term(protos: PrototypeSet, antitypes: AntitypeSet,
                eps: float = DEFAULT_EPS, reduction: str = "antitype_max") -> Value:
    """Repulsion from antitypes: sim(d) = log((d + 1)/(d + eps)) on squared
    distances between active prototypes and antitypes.

    antitype_max (default): each antitype repels its nearest prototype,
    summed over antitypes. prototype_max: each prototype is repelled by
    its nearest antitype. global_max: single worst pair.
    """
    if reduction not in REJECT_REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    if len(antitypes) == 0:
        return Value(np.float32(0.0))
    active_ids = np.nonzero(protos.active)[0]
    p_active = protos.vectors[active_ids, :]
    q = Value(antitypes.vectors)
    d = ad.pairwise_sqdist(q, p_active, coincidence_escape=True)   # (S, n_active)
    sim = ((d + 1.0) / (d + np.float32(eps))).log()
    if reduction == "antitype_max":
        per_antitype, _ = ad.max_with_argmax(sim, axis=1)
        return per_antitype.sum()
    if reduction == "prototype_max":
        per_proto, _ = ad.max_with_argmax(sim, axis=0)
        return per_proto.sum()
    flat = sim.reshape(1, sim.size)
    top, _ = ad.max_with_argmax(flat, axis=1)
    return top.sum()


def con_term(protos: PrototypeSet) -> tuple[int, Value]:
    """Hypercube constraint. Returns the exact violation count (one per
    component outside [0, 1]) and a squared-hinge surrogate that carries
    gradients; the surrogate is zero exactly when the count is zero."""
    p = protos.vectors
    data = p.data
    count = int(np.count_nonzero((data > 1.0) | (data < 0.0)))
    over = (p - 1.0).relu().square().sum()
    under = (-p).relu().square().sum()
    return count, over + under


def clst_term(grids: Value, labels: np.ndarray, protos: PrototypeSet) -> Value:
    """Mean over samples of the squared distance to the nearest own-class
    prototype over all grid cells: pulls some patch toward a prototype."""
    return _min_distance_term(grids, labels, protos, own_class=True)


def sep_term(grids: Value, labels: np.ndarray, protos: PrototypeSet) -> Value:
    """Negated mean nearest wrong-class distance: minimizing pushes
    wrong-class prototypes away from the sample's patches."""
    if protos.n_classes < 2:
        raise ValueError("sep_term requires at least 2 classes")
    return -_min_distance_term(grids, labels, protos, own_class=False)


_FAR = np.float32(1e9)


def _min_distance_term(grids: Value, labels: np.ndarray, protos: PrototypeSet,
                       own_class: bool) -> Value:
    B, _D, Hg, Wg = grids.shape
    labels = np.asarray(labels)
    d = prototype_distances(grids, protos)                    # (B, N, Hg, Wg)
    d_flat = d.reshape(B, protos.n, Hg * Wg)
    d_cells = -ad.max_with_argmax(-d_flat, axis=2)[0]         # (B, N) min over cells
    match = protos.class_of[None, :] == labels[:, None]
    select = match if own_class else ~match
    for b in range(B):
        if not select[b].any():
            raise ValueError(
                f"sample of class {labels[b]} has no "
                f"{'own' if own_class else 'other'}-class prototypes")
    barrier = Value(np.where(select, 0.0, _FAR).astype(np.float32))
    d_masked = d_cells + barrier
    per_sample = -ad.max_with_argmax(-d_masked, axis=1)[0]    # (B,) min over prototypes
    return per_sample.mean()


def l1_term(head: HeadWeights, protos: PrototypeSet) -> Value:
    """L1 on off-class head connections only."""
    _n, k = head.w.shape
    off = protos.class_of[:, None] != np.arange(k)[None, :]
    mask = Value(off.astype(np.float32))
    absw = head.w.relu() + (-head.w).relu()
    return (absw * mask).sum()


@dataclass
class LossBreakdown:
    crsent: float
    clst: float
    sep: float
    l1: float
    reject: float
    con_count: int
    con_surrogate: float
    total: float

    def to_dict(self) -> dict:
        return {
            "crsent": self.crsent, "clst": self.clst, "sep": self.sep,
            "l1": self.l1, "reject": self.reject, "con_count": self.con_count,
            "con_surrogate": self.con_surrogate, "total": self.total,
        }


def total_loss(logits: Value, labels: np.ndarray, grids: Value,
               protos: PrototypeSet, head: HeadWeights,
               antitypes: AntitypeSet | None, weights: LossWeights,
               include_l1: bool = False) -> tuple[Value, LossBreakdown]:
    """Weighted sum of all terms; every term's value is also returned for
    metrics. Terms with zero weight are skipped entirely."""
    crsent = ad.softmax_cross_entropy(logits, labels)
    total = crsent
    clst_v = sep_v = l1_v = reject_v = 0.0
    if weights.lambda_clst > 0:
        clst = clst_term(grids, labels, protos)
        total = total + clst * np.float32(weights.lambda_clst)
        clst_v = clst.item()
    if weights.lambda_sep > 0:
        sep = sep_term(grids, labels, protos)
        total = total + sep * np.float32(weights.lambda_sep)
        sep_v = sep.item()
    if include_l1 and weights.lambda_l1 > 0:
        l1 = l1_term(head, protos)
        total = total + l1 * np.float32(weights.lambda_l1)
        l1_v = l1.item()
    if antitypes is not None and len(antitypes) > 0 and weights.lambda_reject > 0:
        reject = reject_term(protos, antitypes, weights.eps, weights.reject_reduction)
        total = total + reject * np.float32(weights.lambda_reject)
        reject_v = reject.item()
    con_count, con_sur = con_term(protos)
    if weights.lambda_con > 0:
        total = total + con_sur * np.float32(weights.lambda_con)
    breakdown = LossBreakdown(
        crsent=crsent.item(), clst=clst_v, sep=sep_v, l1=l1_v,
        reject=reject_v, con_count=con_count, con_surrogate=con_sur.item(),
        total=total.item(),
    )
    return total, breakdown
