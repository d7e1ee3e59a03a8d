"""Polygon-level precision, recall and F-measure."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import as_polygon, polygon_iou


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_dets: list[int]
    unmatched_truths: list[int]


def _poly_and_score(d):
    if hasattr(d, "polygon"):
        return d.polygon, float(d.score)
    return as_polygon(d), 1.0


def match_detections(dets, truths, iou_thresh: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching in descending score order.

    Each detection claims the unmatched truth it overlaps most, provided the
    polygon IoU reaches ``iou_thresh``. Equal scores keep input order.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    dp = [_poly_and_score(d) for d in dets]
    tp = [as_polygon(t) for t in truths]
    order = sorted(range(len(dp)), key=lambda i: -dp[i][1])
    taken = [False] * len(tp)
    pairs = []
    for i in order:
        best, best_iou = -1, iou_thresh
        for j, t in enumerate(tp):
            if taken[j]:
                continue
            iou = polygon_iou(dp[i][0], t)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            pairs.append((i, best))
    matched_d = {i for i, _ in pairs}
    return MatchResult(
        pairs,
        [i for i in range(len(dp)) if i not in matched_d],
        [j for j in range(len(tp)) if not taken[j]],
    )


def prf(m: MatchResult | int, n_dets: int, n_truths: int) -> tuple[float, float, float]:
    """Precision, recall, F; an empty side scores 1 and F is 0 when P + R = 0."""
    hits = len(m.pairs) if isinstance(m, MatchResult) else int(m)
    p = hits / n_dets if n_dets else 1.0
    r = hits / n_truths if n_truths else 1.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


@dataclass
class Metrics:
    P: float
    R: float
    F: float
    iou_thresh: float
    n_dets: int = 0
    n_truths: int = 0
    n_matched: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def score_detections(dets_by_id: dict, truth_by_id: dict, iou_thresh: float = 0.5) -> Metrics:
    """Micro-averaged metrics over every image in ``truth_by_id``."""
    hits = nd = nt = 0
    for rid, truths in truth_by_id.items():
        dets = dets_by_id.get(rid, [])
        m = match_detections(dets, truths, iou_thresh)
        hits += len(m.pairs)
        nd += len(dets)
        nt += len(truths)
    p, r, f = prf(hits, nd, nt)
    return Metrics(p, r, f, iou_thresh, nd, nt, hits)


def detect_all(detector, records, score_floor: float = 0.3) -> dict:
    return {rec.id: detector.infer(rec.image, score_floor) for rec in records}


def evaluate(detector, records, iou_thresh: float = 0.5, score_floor: float = 0.3) -> Metrics:
    truth = {rec.id: list(rec.strong or []) for rec in records}
    return score_detections(detect_all(detector, records, score_floor), truth, iou_thresh)


def brute_force_max_matching(ious: np.ndarray, iou_thresh: float) -> int:
    """Size of the largest one-to-one matching with IoU >= threshold (small inputs only)."""
    nd, nt = ious.shape
    best = 0

    def rec(i, used, count):
        nonlocal best
        if i == nd:
            best = max(best, count)
            return
        rec(i + 1, used, count)
        for j in range(nt):
            if not used & (1 << j) and ious[i, j] >= iou_thresh:
                rec(i + 1, used | (1 << j), count + 1)

    rec(0, 0, 0)
    return best
