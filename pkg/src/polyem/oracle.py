"""Ground-truth replaying detector for exercising the EM engine in isolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import Candidate
from .geometry import Box, GeometryError, Polygon, bbox_of_polygon, box_iou


@dataclass(frozen=True)
class NoiseSpec:
    drop_rate: float = 0.0
    jitter_std: float = 0.0
    fp_rate: float = 0.0
    score_model: str = "perfect"  # or "beta"
    width: float = 64.0
    height: float = 64.0

    def __post_init__(self):
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError("drop_rate must lie in [0, 1]")
        if self.jitter_std < 0 or self.fp_rate < 0:
            raise ValueError("jitter_std and fp_rate must be non-negative")
        if self.score_model not in ("perfect", "beta"):
            raise ValueError(f"unknown score model {self.score_model!r}")


def _jitter(rng, poly: Polygon, std: float) -> Polygon:
    if std == 0:
        return poly
    for _ in range(10):
        try:
            return Polygon(poly.vertices + rng.normal(0.0, std, poly.vertices.shape))
        except GeometryError:
            continue
    return poly


def _random_blob(rng, noise: NoiseSpec) -> Polygon:
    r = rng.uniform(3.0, 8.0, size=2)
    cx = rng.uniform(r[0], max(noise.width - r[0], r[0] + 1e-6))
    cy = rng.uniform(r[1], max(noise.height - r[1], r[1] + 1e-6))
    phi = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    return Polygon(np.column_stack([cx + r[0] * np.cos(phi), cy + r[1] * np.sin(phi)]))


def oracle_detector(truth, noise: NoiseSpec = NoiseSpec(), rng_seed=0) -> list[Candidate]:
    """Emit (possibly dropped, jittered) ground truth plus random false positives."""
    rng = np.random.default_rng(rng_seed)
    out = []
    for poly in truth:
        if rng.uniform() < noise.drop_rate:
            continue
        p = _jitter(rng, poly, noise.jitter_std)
        score = 1.0 if noise.score_model == "perfect" else float(rng.beta(6.0, 2.0))
        out.append(Candidate(bbox_of_polygon(p), p, score))
    for _ in range(int(rng.poisson(noise.fp_rate)) if noise.fp_rate > 0 else 0):
        p = _random_blob(rng, noise)
        score = float(rng.uniform(0.0, 0.5)) if noise.score_model == "perfect" else float(rng.beta(2.0, 6.0))
        out.append(Candidate(bbox_of_polygon(p), p, score))
    out.sort(key=lambda c: -c.score)
    return out


class OracleDetector:
    """Detector double keyed on image identity; same interface as ``DetectorState``."""

    def __init__(self, records, noise: NoiseSpec = NoiseSpec(), rng_seed: int = 0):
        self.noise = noise
        self._truth = {}
        for k, rec in enumerate(records):
            self._truth[id(rec.image)] = (rec.image, list(rec.strong or []), rng_seed * 1_000_003 + k)

    def _lookup(self, img):
        try:
            return self._truth[id(img)]
        except KeyError:
            raise KeyError("image unknown to the oracle detector") from None

    def infer(self, img, score_floor: float = 0.0) -> list[Candidate]:
        _, truth, seed = self._lookup(img)
        return [c for c in oracle_detector(truth, self.noise, seed) if c.score >= score_floor]

    def contour_from_box(self, img, box: Box) -> Polygon:
        _, truth, seed = self._lookup(img)
        if truth:
            best = max(truth, key=lambda p: box_iou(bbox_of_polygon(p), box))
            if box_iou(bbox_of_polygon(best), box) > 0:
                return _jitter(np.random.default_rng(seed), best, self.noise.jitter_std)
        return Polygon([(box.x_min, box.y_min), (box.x_max, box.y_min), (box.x_max, box.y_max), (box.x_min, box.y_max)])
