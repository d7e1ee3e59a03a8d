"""Synthetic scenes of curved, arbitrary-shaped instances on a feature grid.

A scene is a ``height x width`` grid of ``feature_dim`` channels. Channel 0
carries "ink" inside instances; channels 1-3 are noisy views correlated with
the ink; channel 4 marks unlabeled distractor blobs (which also leak ink);
the remaining channels are nuisance noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely

from .geometry import GeometryError, Polygon, polygon_iou
from .weak_labels import WeakKind, WeakLabel, make_weak_label


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthParams:
    width: int = 64
    height: int = 64
    feature_dim: int = 8
    n_instances: tuple[int, int] = (1, 4)
    size: tuple[float, float] = (14.0, 28.0)
    thickness: tuple[float, float] = (5.0, 9.0)
    curvature: tuple[float, float] = (0.0, 0.04)
    ribbon_fraction: float = 0.6
    contrast: tuple[float, float] = (0.5, 1.2)
    noise_std: float = 0.25
    n_distractors: tuple[int, int] = (0, 2)
    distractor_ink: tuple[float, float] = (0.4, 0.9)
    distractor_radius: tuple[float, float] = (1.5, 3.5)
    marker_strength: float = 0.8
    margin: float = 2.0
    max_attempts: int = 1000

    def __post_init__(self):
        lo, hi = self.n_instances
        if lo < 0 or hi < lo:
            raise ValueError(f"bad instance range {self.n_instances}")
        if self.feature_dim < 5:
            raise ValueError("feature_dim must be >= 5")
        if not (0 < self.size[0] <= self.size[1]):
            raise ValueError(f"bad size range {self.size}")
        if self.curvature[0] < 0 or self.curvature[1] < self.curvature[0]:
            raise ValueError(f"bad curvature range {self.curvature}")


@dataclass(eq=False)
class SceneImage:
    """A feature grid. Features are read-only so derived arrays can be memoized."""

    width: int
    height: int
    features: np.ndarray  # (height, width, F) float32
    _derived: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.features = np.array(self.features, dtype=np.float32, order="C")
        if self.features.ndim != 3 or self.features.shape[:2] != (self.height, self.width):
            raise ValueError("feature grid does not match image size")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite features")
        self.features.flags.writeable = False

    def derived(self, key, compute):
        """Memoize ``compute(self)`` under ``key``."""
        try:
            return self._derived[key]
        except KeyError:
            value = self._derived[key] = compute(self)
            return value

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]


@dataclass
class ImageRecord:
    id: str
    image: SceneImage
    strong: list[Polygon] | None = None
    weak: WeakLabel | None = None
    meta: dict = field(default_factory=dict)


def _ellipse(rng, p: SynthParams) -> np.ndarray:
    a = rng.uniform(*p.size) / 2
    b = a * rng.uniform(0.35, 0.9)
    phi = np.linspace(0, 2 * np.pi, 24, endpoint=False)
    wobble = np.ones_like(phi)
    amp = rng.uniform(*p.curvature) * 2.0
    for k in (2, 3):
        wobble += amp * rng.uniform(0, 1) * np.cos(k * phi + rng.uniform(0, 2 * np.pi))
    pts = np.column_stack([a * np.cos(phi), b * np.sin(phi)]) * wobble[:, None]
    return pts


def _ribbon(rng, p: SynthParams) -> np.ndarray:
    length = rng.uniform(*p.size)
    thick = rng.uniform(*p.thickness)
    kappa = rng.uniform(*p.curvature) * rng.choice([-1.0, 1.0])
    s = np.linspace(-length / 2, length / 2, 12)
    if abs(kappa) < 1e-9:
        c = np.column_stack([s, np.zeros_like(s)])
        n = np.tile([0.0, 1.0], (len(s), 1))
    else:
        ang = kappa * s
        c = np.column_stack([np.sin(ang) / kappa, (1 - np.cos(ang)) / kappa])
        n = np.column_stack([-np.sin(ang), np.cos(ang)])
    left = c + n * thick / 2
    right = c - n * thick / 2
    return np.vstack([left, right[::-1]])


def _rotate(pts: np.ndarray, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return pts @ np.array([[c, s], [-s, c]])


def _place(rng, raw: np.ndarray, p: SynthParams) -> np.ndarray | None:
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    xr = (1.0 - lo[0], p.width - 1.0 - hi[0])
    yr = (1.0 - lo[1], p.height - 1.0 - hi[1])
    if xr[0] > xr[1] or yr[0] > yr[1]:
        return None
    return raw + np.array([rng.uniform(*xr), rng.uniform(*yr)])


def _cell_mask(shape, width: int, height: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return shapely.contains_xy(shape, xs.ravel() + 0.5, ys.ravel() + 0.5).reshape(height, width)


def synth_scene(rng_seed: int, params: SynthParams = SynthParams()) -> ImageRecord:
    p = params
    rng = np.random.default_rng(rng_seed)
    k = int(rng.integers(p.n_instances[0], p.n_instances[1] + 1))
    n_dis = int(rng.integers(p.n_distractors[0], p.n_distractors[1] + 1))

    polys: list[Polygon] = []
    attempts = 0
    while len(polys) < k:
        attempts += 1
        if attempts > p.max_attempts:
            raise SynthError(f"could not place {k} instances in {p.max_attempts} attempts")
        raw = _ribbon(rng, p) if rng.uniform() < p.ribbon_fraction else _ellipse(rng, p)
        placed = _place(rng, _rotate(raw, rng.uniform(0, np.pi)), p)
        if placed is None:
            continue
        try:
            poly = Polygon(placed)
        except GeometryError:
            continue
        if any(poly.shape.distance(q.shape) < p.margin for q in polys):
            continue
        polys.append(poly)

    blobs = []
    while len(blobs) < n_dis:
        attempts += 1
        if attempts > p.max_attempts:
            raise SynthError("could not place distractors")
        r = rng.uniform(*p.distractor_radius)
        cx, cy = rng.uniform(r + 1, p.width - r - 1), rng.uniform(r + 1, p.height - r - 1)
        blob = shapely.Point(cx, cy).buffer(r, quad_segs=4)
        if any(blob.distance(q.shape) < p.margin for q in polys):
            continue
        blobs.append((blob, rng.uniform(*p.distractor_ink)))

    h, w, f = p.height, p.width, p.feature_dim
    ink = np.zeros((h, w))
    for poly in polys:
        ink += rng.uniform(*p.contrast) * _cell_mask(poly.shape, w, h)
    marker = np.zeros((h, w))
    for blob, level in blobs:
        m = _cell_mask(blob, w, h)
        ink += level * m
        marker += m

    noise = rng.normal(0.0, p.noise_std, size=(h, w, f))
    feats = noise
    feats[..., 0] += ink
    feats[..., 1] += 0.7 * ink
    feats[..., 2] += 0.5 * ink
    # channel 3: locally averaged ink, a cheap context cue
    pad = np.pad(ink, 1, mode="edge")
    blur = sum(pad[i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0
    feats[..., 3] += 0.5 * blur
    feats[..., 4] += p.marker_strength * marker
    image = SceneImage(w, h, feats.astype(np.float32))
    return ImageRecord(id=f"scene-{rng_seed}", image=image, strong=polys)


def synth_dataset(n: int, rng_seed: int, params: SynthParams = SynthParams()) -> list[ImageRecord]:
    seeds = np.random.SeedSequence(rng_seed).generate_state(max(n, 1), dtype=np.uint32)[:n]
    records = []
    for i, s in enumerate(seeds):
        rec = synth_scene(int(s), params)
        rec.id = f"img-{rng_seed}-{i:05d}"
        records.append(rec)
    return records


def split_dataset(records, strong_fraction: float, rng_seed: int, weak_kind=WeakKind.TIGHT):
    """Randomly partition records into a polygon-labelled and a weakly labelled set.

    Weak records lose their polygons and receive a weak label of
    ``weak_kind`` derived from them.
    """
    if not 0.0 <= strong_fraction <= 1.0:
        raise ValueError("strong_fraction must lie in [0, 1]")
    kind = WeakKind.parse(weak_kind)
    records = list(records)
    n_strong = int(math.floor(strong_fraction * len(records) + 0.5))
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(records))
    strong_idx = set(order[:n_strong].tolist())
    label_seeds = rng.integers(0, 2**31 - 1, size=len(records))
    strong, weak = [], []
    for i, rec in enumerate(records):
        if i in strong_idx:
            strong.append(ImageRecord(rec.id, rec.image, strong=list(rec.strong or []), weak=None))
        else:
            label = make_weak_label(
                kind, rec.strong or [], rec.image.width, rec.image.height, int(label_seeds[i])
            )
            weak.append(ImageRecord(rec.id, rec.image, strong=None, weak=label))
    return strong, weak


def truth_by_id(records) -> dict[str, list[Polygon]]:
    return {r.id: list(r.strong or []) for r in records}


def check_scene(rec: ImageRecord) -> None:
    """Raise if a generated record violates the generator's guarantees."""
    img = rec.image
    polys = rec.strong or []
    for poly in polys:
        v = poly.vertices
        if v.min() < 0 or v[:, 0].max() > img.width or v[:, 1].max() > img.height:
            raise SynthError(f"{rec.id}: polygon out of bounds")
    for i in range(len(polys)):
        for j in range(i + 1, len(polys)):
            if polygon_iou(polys[i], polys[j]) != 0.0:
                raise SynthError(f"{rec.id}: overlapping instances")


# -- dataset file -------------------------------------------------------------


def _floats(a: np.ndarray) -> str:
    return "[" + ",".join(np.char.mod("%.9g", np.asarray(a, dtype=np.float64).ravel()).tolist()) + "]"


def _record_json(rec: ImageRecord) -> str:
    img = rec.image
    head = {
        "id": rec.id,
        "width": img.width,
        "height": img.height,
        "strong": None if rec.strong is None else [p.to_list() for p in rec.strong],
        "weak": None if rec.weak is None else rec.weak.to_json(),
    }
    body = json.dumps(head)[:-1]
    return body + ', "features": ' + _floats(img.features) + "}"


def dumps_dataset(records, feature_dim: int, extra: dict | None = None) -> str:
    head = {"feature_dim": feature_dim}
    if extra:
        head.update(extra)
    parts = [json.dumps(head)[:-1], ', "records": [']
    parts.append(",\n".join(_record_json(r) for r in records))
    parts.append("]}\n")
    return "".join(parts)


def save_dataset(path, records, feature_dim: int, extra: dict | None = None) -> None:
    Path(path).write_text(dumps_dataset(records, feature_dim, extra))


def load_dataset(path) -> tuple[int, list[ImageRecord]]:
    doc = json.loads(Path(path).read_text())
    fdim = int(doc["feature_dim"])
    records = []
    for r in doc["records"]:
        h, w = int(r["height"]), int(r["width"])
        feats = np.asarray(r["features"], dtype=np.float32).reshape(h, w, fdim)
        strong = None if r.get("strong") is None else [Polygon(p) for p in r["strong"]]
        weak = None if r.get("weak") is None else WeakLabel.from_json(r["weak"])
        records.append(ImageRecord(r["id"], SceneImage(w, h, feats), strong, weak))
    return fdim, records
