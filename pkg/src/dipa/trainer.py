"""Training schedules and the two deselection modes.

Phases: warm-up (encoder frozen), joint, push, last-layer. Deselection
is either evidence masking or rounds of push -> consult -> antitype
insertion -> SGD under the rejection-augmented loss. The encoder stays
frozen during deselection so antitypes keep their meaning; frozen-encoder
phases run on cached latent grids, which skips all conv work.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .datagen import DatasetBundle, SplitData
from .losses import AntitypeSet, LossWeights, total_loss
from .model import ProtoPartModel, PushReport, PrototypeSet, prototype_distances, evidence, classify
from .oracle import ConsultUnavailable

# rng stream tags: keep stable, they define reproducibility
_STREAM_WARMUP = 0
_STREAM_JOINT = 1
_STREAM_LAST_LAYER = 2
_STREAM_DESELECT = 3


class TrainingDiverged(RuntimeError):
    def __init__(self, phase: str, epoch: int, batch: int):
        super().__init__(f"non-finite loss in phase {phase!r}, epoch {epoch}, batch {batch}")
        self.phase = phase
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    warmup_epochs: int = 5
    joint_epochs: int = 16
    deselect_epochs: int = 4          # M in the rejection loop
    rejection_rounds: int = 3         # N rounds of consulting the user
    last_layer_epochs: int = 10
    batch_size: int = 32
    lr_encoder: float = 0.05
    lr_prototypes: float = 0.01
    lr_head: float = 0.01
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        for name in ("warmup_epochs", "joint_epochs", "deselect_epochs",
                     "rejection_rounds", "last_layer_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class MetricsLog:
    """Per-epoch loss records, optionally mirrored to a JSON-lines file."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict):
        self.records.append(record)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def _rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def _run_epochs(model: ProtoPartModel, data: SplitData, config: TrainConfig,
                phase: str, stream: int, stream_index: int, epochs: int,
                params: list[Value], lrs: list[float],
                antitypes: AntitypeSet | None = None,
                frozen_encoder: bool = False,
                log: MetricsLog | None = None) -> list[dict]:
    """Minibatch SGD epochs; returns the per-epoch mean loss breakdowns."""
    n = len(data)
    rng = _rng(config.seed, stream, stream_index)
    cached_grids = None
    if frozen_encoder:
        g = model.encode_dataset(data.images, config.batch_size)   # (M, Hg, Wg, D)
        cached_grids = np.ascontiguousarray(g.transpose(0, 3, 1, 2))
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        n_batches = 0
        last_con_count = 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            labels = data.labels[idx]
            if frozen_encoder:
                grids = Value(cached_grids[idx])
            else:
                grids = model.encode(data.images[idx])
            d = prototype_distances(grids, model.prototypes)
            emap = evidence(d, model.eps)
            logits = classify(emap, model.head, model.prototypes)
            loss, breakdown = total_loss(
                logits, labels, grids, model.prototypes, model.head,
                antitypes, config.weights)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(phase, epoch, bi)
            ad.backward(loss)
            for p, lr in zip(params, lrs):
                if p.grad is not None:
                    p.data -= np.float32(lr) * p.grad
            ad.zero_grads(params)
            for key, v in breakdown.to_dict().items():
                sums[key] = sums.get(key, 0.0) + v
            last_con_count = breakdown.con_count
            n_batches += 1
        record = {k: v / n_batches for k, v in sums.items()}
        record["con_count"] = last_con_count   # count at end of epoch, not a mean
        record["epoch"] = epoch
        record["phase"] = phase
        history.append(record)
        if log:
            log.append(record)
    return history


def evaluate(model: ProtoPartModel, split: SplitData) -> float:
    return model.accuracy(split.images, split.labels)


def initial_training(model: ProtoPartModel, bundle: DatasetBundle,
                     config: TrainConfig, log: MetricsLog | None = None) -> dict:
    """Warm-up with the encoder frozen, then joint training of all layers
    and the prototype vectors. Returns the loss history per phase."""
    if bundle.n_classes < 2:
        raise ValueError("need at least 2 classes to train")
    warm = _run_epochs(
        model, bundle.train, config, "warmup", _STREAM_WARMUP, 0,
        config.warmup_epochs,
        params=[model.prototypes.vectors, model.head.w],
        lrs=[config.lr_prototypes, config.lr_head],
        frozen_encoder=True, log=log)
    enc_params = model.encoder_params()
    joint = _run_epochs(
        model, bundle.train, config, "joint", _STREAM_JOINT, 0,
        config.joint_epochs,
        params=[*enc_params, model.prototypes.vectors, model.head.w],
        lrs=[config.lr_encoder] * len(enc_params) + [config.lr_prototypes, config.lr_head],
        frozen_encoder=False, log=log)
    return {"warmup": warm, "joint": joint}


def mask_deselect(protos: PrototypeSet, rejected_ids) -> PrototypeSet:
    """Deactivate the given prototypes; evidence masking only, no training."""
    protos.deactivate(rejected_ids)
    return protos


def last_layer_finetune(model: ProtoPartModel, bundle: DatasetBundle,
                        config: TrainConfig, epochs: int | None = None,
                        log: MetricsLog | None = None) -> list[dict]:
    """Head-only training on cross-entropy plus the off-class L1 term.

    Encoder and prototypes are frozen, so max evidence per (sample,
    prototype) is precomputed once and each epoch is a pure linear pass.
    """
    epochs = config.last_layer_epochs if epochs is None else epochs
    data = bundle.train
    feats = []
    with ad.no_grad():
        for i in range(0, len(data), config.batch_size):
            grids = model.encode(data.images[i:i + config.batch_size])
            d = prototype_distances(grids, model.prototypes)
            emap = evidence(d, model.eps)
            feats.append(emap.max_scores.data)
    features = np.concatenate(feats, axis=0)                     # (M, N)
    active_mask = Value(model.prototypes.active.astype(np.float32))
    rng = _rng(config.seed, _STREAM_LAST_LAYER, 0)
    from .losses import l1_term
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        sums = {"crsent": 0.0, "l1": 0.0, "total": 0.0}
        n_batches = 0
        for bi, start in enumerate(range(0, len(data), config.batch_size)):
            idx = order[start:start + config.batch_size]
            f = Value(features[idx])
            logits = (f * active_mask) @ model.head.w
            crsent = ad.softmax_cross_entropy(logits, data.labels[idx])
            l1 = l1_term(model.head, model.prototypes)
            loss = crsent + l1 * np.float32(config.weights.lambda_l1)
            if not np.isfinite(loss.data):
                raise TrainingDiverged("last_layer", epoch, bi)
            ad.backward(loss)
            model.head.w.data -= np.float32(config.lr_head) * model.head.w.grad
            model.head.w.zero_grad()
            sums["crsent"] += crsent.item()
            sums["l1"] += l1.item()
            sums["total"] += loss.item()
            n_batches += 1
        record = {k: v / n_batches for k, v in sums.items()}
        record.update(epoch=epoch, phase="last_layer", clst=0.0, sep=0.0,
                      reject=0.0, con_count=0, con_surrogate=0.0)
        history.append(record)
        if log:
            log.append(record)
    return history


# -- rejection sessions ------------------------------------------------------

@dataclass
class RoundRecord:
    round_index: int
    verdicts: dict[int, bool]
    rejected_ids: list[int]
    antitypes_added: int
    accuracy_before: float
    accuracy_after: float
    push_moved: float                     # total latent distance moved by final push
    loss_epochs: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdicts"] = {str(k): bool(v) for k, v in self.verdicts.items()}
        return d


@dataclass
class RejectionSession:
    mode: str                                       # mask | deselect | iterative
    rounds: list[RoundRecord] = field(default_factory=list)
    antitypes: AntitypeSet = field(default_factory=AntitypeSet)
    status: str = "complete"                        # complete | suspended
    next_round: int = 1
    final_verdicts: dict[int, bool] = field(default_factory=dict)

    def nonobject_counts(self) -> list[int]:
        counts = [sum(r.verdicts.values()) for r in self.rounds]
        if self.final_verdicts:
            counts.append(sum(self.final_verdicts.values()))
        return counts


def run_rejection_round(model: ProtoPartModel, bundle: DatasetBundle,
                        antitypes: AntitypeSet, rejected_ids: list[int],
                        round_index: int, config: TrainConfig,
                        log: MetricsLog | None = None) -> RoundRecord:
    """One deselection round on an already-pushed model: freeze copies of
    the rejected prototypes as antitypes, train under the full loss with
    the encoder frozen, then push so prototypes are patch-exact again."""
    rejected_ids = sorted(int(j) for j in rejected_ids)
    acc_before = evaluate(model, bundle.test)
    added = 0
    if rejected_ids:
        vecs = model.prototypes.vectors.data[rejected_ids].copy()
        added = antitypes.add(vecs, round_index, rejected_ids)
    epochs = _run_epochs(
        model, bundle.train, config, f"deselect_round{round_index}",
        _STREAM_DESELECT, round_index, config.deselect_epochs,
        params=[model.prototypes.vectors, model.head.w],
        lrs=[config.lr_prototypes, config.lr_head],
        antitypes=antitypes, frozen_encoder=True, log=log)
    report = model.push(bundle.train.images, bundle.train.labels, bundle.train.ids)
    moved = float(sum(e.distance_moved for e in report.entries))
    acc_after = evaluate(model, bundle.test)
    return RoundRecord(
        round_index=round_index, verdicts={}, rejected_ids=rejected_ids,
        antitypes_added=added, accuracy_before=acc_before,
        accuracy_after=acc_after, push_moved=moved, loss_epochs=epochs)


def iterative_rejection(model: ProtoPartModel, bundle: DatasetBundle,
                        consult: Callable[[PrototypeSet, PushReport], dict[int, bool]],
                        config: TrainConfig,
                        session: RejectionSession | None = None,
                        out_dir: str | Path | None = None,
                        log: MetricsLog | None = None) -> RejectionSession:
    """Alternate push -> consult -> antitype insertion -> deselection
    training for the configured number of rounds, then a final push and
    consult. If the verdict provider raises ConsultUnavailable the session
    suspends (resumable by passing it back in)."""
    if session is None:
        session = RejectionSession(mode="iterative", antitypes=AntitypeSet())
    session.status = "running"
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    for round_index in range(session.next_round, config.rejection_rounds + 1):
        report = model.push(bundle.train.images, bundle.train.labels, bundle.train.ids)
        try:
            verdicts = consult(model.prototypes, report)
        except ConsultUnavailable:
            session.status = "suspended"
            session.next_round = round_index
            _write_session(session, out_dir)
            return session
        rejected = [j for j, bad in sorted(verdicts.items()) if bad]
        record = run_rejection_round(model, bundle, session.antitypes,
                                     rejected, round_index, config, log=log)
        record.verdicts = verdicts
        session.rounds.append(record)
        session.next_round = round_index + 1
        if out_dir:
            from .checkpoint import save_checkpoint
            save_checkpoint(out_dir / f"round_{round_index}.ckpt", model, session.antitypes)
        _write_session(session, out_dir)

    final_report = model.push(bundle.train.images, bundle.train.labels, bundle.train.ids)
    try:
        session.final_verdicts = consult(model.prototypes, final_report)
    except ConsultUnavailable:
        session.status = "suspended"
        session.next_round = config.rejection_rounds + 1
        _write_session(session, out_dir)
        return session
    session.status = "complete"
    _write_session(session, out_dir)
    return session


def _write_session(session: RejectionSession, out_dir: Path | None):
    if not out_dir:
        return
    path = out_dir / "session.jsonl"
    with path.open("w") as f:
        for r in session.rounds:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        f.write(json.dumps({
            "status": session.status, "mode": session.mode,
            "next_round": session.next_round,
            "final_verdicts": {str(k): bool(v) for k, v in session.final_verdicts.items()},
            "nonobject_counts": session.nonobject_counts(),
        }, sort_keys=True) + "\n")
