"""Pseudo-label EM loop: E-step filtering per weak-label kind and confidence-weighted M-steps."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import detector as det
from .detector import Candidate, DetectorState
from .evaluation import evaluate, match_detections
from .geometry import box_iou
from .weak_labels import WeakKind, WeakLabel


@dataclass(frozen=True)
class EmConfig:
    confidence_threshold: float = 0.5
    iou_threshold: float = 0.5
    rounds_tag_coarse: int = 3
    rounds_tight_loose: int = 1
    epochs_per_mstep: int = 10
    # (epoch, multiplier) milestones; halvings at 40/60/75/85% of the M-step
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 1.0), (4, 0.5), (6, 0.25), (7, 0.125), (8, 0.0625))
    batch_size: int = 8
    rng_seed: int = 0
    base_lr: float = 0.05
    # epochs of the strong-only initialisation; None means epochs_per_mstep
    init_epochs: int | None = None
    use_confidence: bool = True
    eval_iou: float = 0.5
    # heatmap scores of true instances cluster near 0.5, so report at 0.3
    eval_score_floor: float = 0.3

    def __post_init__(self):
        for name in ("confidence_threshold", "iou_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.rounds_tag_coarse < 1 or self.rounds_tight_loose < 1:
            raise ValueError("rounds must be >= 1")
        if self.init_epochs is not None and self.init_epochs < 1:
            raise ValueError("init_epochs must be >= 1")
        if self.epochs_per_mstep < 1 or self.batch_size < 1:
            raise ValueError("epochs_per_mstep and batch_size must be >= 1")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        object.__setattr__(self, "lr_schedule", tuple((int(e), float(m)) for e, m in self.lr_schedule))

    def rounds_for(self, kind) -> int:
        kind = WeakKind.parse(kind)
        return self.rounds_tag_coarse if kind in (WeakKind.TAG, WeakKind.COARSE) else self.rounds_tight_loose

    def lr_at(self, epoch: int, n_epochs: int | None = None) -> float:
        """Learning rate at ``epoch``; milestones stretch to an M-step of ``n_epochs``."""
        stretch = 1.0 if n_epochs is None else n_epochs / self.epochs_per_mstep
        mult = 1.0
        for start, m in sorted(self.lr_schedule):
            if epoch >= start * stretch:
                mult = m
        return self.base_lr * mult

    def to_json(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        return d

    @classmethod
    def from_json(cls, d: dict) -> EmConfig:
        d = dict(d)
        if "lr_schedule" in d:
            d["lr_schedule"] = tuple(tuple(x) for x in d["lr_schedule"])
        return cls(**d)


@dataclass
class PseudoAnnotationSet:
    record_id: str
    items: list[Candidate] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class EmRoundReport:
    round: int
    n_pseudo: int
    pseudo_precision: float | None
    pseudo_recall: float | None
    eval_P: float
    eval_R: float
    eval_F: float
    mean_loss: float

    def to_json(self) -> dict:
        return asdict(self)


# -- E-step -------------------------------------------------------------------


def _expect(label: WeakLabel, kind: WeakKind) -> None:
    if label.kind is not kind:
        raise ValueError(f"expected a {kind.value} label, got {label.kind.value}")


def estep_tag(state, img, tag: WeakLabel, S: float, record_id: str = "") -> PseudoAnnotationSet:
    """Keep detections scoring strictly above ``S`` on images tagged as containing text."""
    _expect(tag, WeakKind.TAG)
    if not tag.has_text:
        return PseudoAnnotationSet(record_id)
    # Detections are capped by score rank, so flooring at S keeps exactly the
    # candidates that a zero floor would have ranked above S.
    return PseudoAnnotationSet(record_id, [c for c in state.infer(img, S) if c.score > S])


def estep_coarse(state, img, coarse: WeakLabel, S: float, H: float, record_id: str = "") -> PseudoAnnotationSet:
    """Tag filter plus the requirement of overlapping some coarse box by more than ``H``."""
    _expect(coarse, WeakKind.COARSE)
    keep = [
        c
        for c in state.infer(img, S)
        if c.score > S and any(box_iou(c.box, g) > H for g in coarse.boxes)
    ]
    return PseudoAnnotationSet(record_id, keep)


def _from_boxes(state, img, label: WeakLabel, record_id: str) -> PseudoAnnotationSet:
    return PseudoAnnotationSet(
        record_id, [Candidate(g, state.contour_from_box(img, g), 1.0) for g in label.boxes]
    )


def estep_tight(state, img, tight: WeakLabel, record_id: str = "") -> PseudoAnnotationSet:
    _expect(tight, WeakKind.TIGHT)
    return _from_boxes(state, img, tight, record_id)


def estep_loose(state, img, loose: WeakLabel, record_id: str = "") -> PseudoAnnotationSet:
    _expect(loose, WeakKind.LOOSE)
    return _from_boxes(state, img, loose, record_id)


def estep(state, record, cfg: EmConfig) -> PseudoAnnotationSet:
    label = record.weak
    if label is None:
        raise ValueError(f"record {record.id} has no weak label")
    if label.kind is WeakKind.TAG:
        return estep_tag(state, record.image, label, cfg.confidence_threshold, record.id)
    if label.kind is WeakKind.COARSE:
        return estep_coarse(
            state, record.image, label, cfg.confidence_threshold, cfg.iou_threshold, record.id
        )
    if label.kind is WeakKind.TIGHT:
        return estep_tight(state, record.image, label, record.id)
    return estep_loose(state, record.image, label, record.id)


# -- M-step -------------------------------------------------------------------


def training_pool(strong, pseudo) -> list:
    """Training examples as ``(image, [(polygon, s), ...])``.

    Zero-confidence instances carry no loss and are left out. A weak record
    whose pseudo set ends up empty is kept only when its label says the image
    has no instances, in which case it trains the background.
    """
    pool = [(r.image, [(p, 1.0) for p in (r.strong or [])]) for r in strong]
    for rec, ps in pseudo:
        items = [(c.polygon, c.score) for c in ps.items if c.score > 0.0]
        if items or (rec.weak is not None and not rec.weak.has_text):
            pool.append((rec.image, items))
    return pool


def mstep(
    state: DetectorState,
    strong,
    pseudo,
    cfg: EmConfig,
    rng_seed=None,
    losses: list | None = None,
    epochs: int | None = None,
) -> DetectorState:
    """Run shuffled SGD epochs over strong plus pseudo records.

    ``epochs`` defaults to ``cfg.epochs_per_mstep``. Per-batch total losses
    are appended to ``losses`` when a list is given.
    """
    pool = training_pool(strong, pseudo)
    rng = np.random.default_rng(cfg.rng_seed if rng_seed is None else rng_seed)
    if not pool:
        return state
    n_epochs = cfg.epochs_per_mstep if epochs is None else epochs
    for epoch in range(n_epochs):
        lr = cfg.lr_at(epoch, n_epochs)
        order = rng.permutation(len(pool))
        for lo in range(0, len(pool), cfg.batch_size):
            batch = [pool[i] for i in order[lo : lo + cfg.batch_size]]
            state, br = det.train_step(state, batch, lr, rng=rng, use_confidence=cfg.use_confidence)
            if losses is not None:
                losses.append(br.total)
    return state


# -- driver -------------------------------------------------------------------


def pseudo_quality(pseudo, truth: dict, iou_thresh: float = 0.5) -> tuple[float, float]:
    hits = n_items = n_truth = 0
    for rec, ps in pseudo:
        t = truth.get(rec.id, [])
        hits += len(match_detections(ps.items, t, iou_thresh).pairs)
        n_items += len(ps.items)
        n_truth += len(t)
    p = hits / n_items if n_items else 1.0
    r = hits / n_truth if n_truth else 1.0
    return p, r


TrainFn = Callable[..., DetectorState]


@dataclass
class EmResult:
    reports: list[EmRoundReport]
    states: list  # detector after each round, round 0 first

    @property
    def final_state(self):
        return self.states[-1]


def run_em(
    strong,
    weak,
    weak_kind,
    cfg: EmConfig,
    *,
    eval_records=(),
    truth: dict | None = None,
    init_state=None,
    detector_config: det.DetectorConfig | None = None,
    train: TrainFn = mstep,
    progress: Callable[[EmRoundReport], None] | None = None,
) -> EmResult:
    """Round 0 trains on strong data alone; each later round relabels the weak
    records with the previous model and retrains on strong plus pseudo labels.

    ``truth`` maps weak record ids to held-back polygons and only feeds the
    pseudo-label diagnostics. ``train`` can be swapped out, for example to run
    the loop around an oracle detector.
    """
    kind = WeakKind.parse(weak_kind)
    strong, weak = list(strong), list(weak)
    if not strong:
        raise ValueError("run_em needs at least one strongly labelled record")
    for rec in weak:
        if rec.weak is None or rec.weak.kind is not kind:
            raise ValueError(f"record {rec.id} does not carry a {kind.value} label")

    if init_state is None:
        dc = detector_config or det.DetectorConfig(feature_dim=strong[0].image.feature_dim)
        if kind is WeakKind.LOOSE and not dc.loose_augmentation:
            dc = replace(dc, loose_augmentation=True)
        init_state = DetectorState.initial(dc)

    # without weak records the loop degenerates to the fully supervised round 0
    n_rounds = cfg.rounds_for(kind) if weak else 0
    seeds = np.random.SeedSequence(cfg.rng_seed).generate_state(cfg.rounds_for(kind) + 1)
    eval_records = list(eval_records)

    def report(r, state, pseudo, losses):
        if eval_records:
            m = evaluate(state, eval_records, cfg.eval_iou, cfg.eval_score_floor)
            ep, er, ef = m.P, m.R, m.F
        else:
            ep = er = ef = math.nan
        pp = pr = None
        if pseudo is not None and truth is not None:
            pp, pr = pseudo_quality(pseudo, truth)
        rep = EmRoundReport(
            round=r,
            n_pseudo=0 if pseudo is None else sum(len(ps) for _, ps in pseudo),
            pseudo_precision=pp,
            pseudo_recall=pr,
            eval_P=ep,
            eval_R=er,
            eval_F=ef,
            mean_loss=float(np.mean(losses)) if losses else math.nan,
        )
        if progress is not None:
            progress(rep)
        return rep

    losses: list = []
    state = train(init_state, strong, [], cfg, rng_seed=int(seeds[0]), losses=losses, epochs=cfg.init_epochs)
    reports = [report(0, state, None, losses)]
    states = [state]
    for r in range(1, n_rounds + 1):
        pseudo = [(rec, estep(state, rec, cfg)) for rec in weak]
        losses = []
        state = train(state, strong, pseudo, cfg, rng_seed=int(seeds[r]), losses=losses)
        reports.append(report(r, state, pseudo, losses))
        states.append(state)
    return EmResult(reports, states)


# -- report files -------------------------------------------------------------

REPORT_FIELDS = [f for f in EmRoundReport.__dataclass_fields__]


def _clean(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def reports_to_json(reports, extra: dict | None = None) -> str:
    doc = dict(extra or {})
    doc["rounds"] = [{k: _clean(v) for k, v in r.to_json().items()} for r in reports]
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in reports:
        row = []
        for k in REPORT_FIELDS:
            v = _clean(getattr(r, k))
            row.append("" if v is None else (f"{v:.6f}" if isinstance(v, float) else v))
        w.writerow(row)
    return buf.getvalue()
