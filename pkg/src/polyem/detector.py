"""Contour-based detector: localization, contour initialization, deformation.

Every head is linear (or logistic) on fixed features, so the composite
loss has closed-form gradients. Contours handed from one stage to the next
are treated as constants when differentiating: the extreme-point head is
not trained through the deformation loss, and each deformation iteration
sees the previous iteration's output as a fixed input.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from .features import (
    bilinear,
    block_edges,
    block_mean,
    cell_descriptors,
    descriptor_dim,
    expand,
    standardize,
)
from .geometry import (
    Box,
    GeometryError,
    Polygon,
    bbox_of_polygon,
    expand_box,
    extreme_points,
    octagon_from_extremes,
    repair_contour,
    resample_contour,
)

# walking order of box sides: top, right, bottom, left
_TANGENT = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
_INWARD = np.array([[0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [1.0, 0.0]])


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    focal_gamma: float = 2.0
    focal_beta: float = 4.0
    size_weight: float = 0.1
    offset_weight: float = 0.1
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("lambda1 and lambda2 must be positive")


@dataclass(frozen=True)
class DetectorConfig:
    feature_dim: int = 8
    # cells per score-map block along each axis
    stride: int = 4
    n_points: int = 128
    n_iterations: int = 3
    active_iterations: int = 3
    window: int = 9
    profile: tuple[float, ...] = (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)
    init_along: int = 9
    init_depths: tuple[float, ...] = (0.0, 0.1, 0.2)
    init_max_depth: float = 0.25
    offset_clamp: float = 0.5
    output_extent: float = 1.5
    max_detections: int = 32
    min_box: float = 2.0
    loose_augmentation: bool = False
    # fixed random ReLU features appended to the cell descriptors
    hidden_units: int = 512
    backbone_seed: int = 0
    # per-head step multipliers, in PARAM_NAMES order
    lr_scale: tuple[float, float, float, float] = (0.01, 0.3, 1.0, 0.3)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        object.__setattr__(self, "profile", tuple(float(p) for p in self.profile))
        object.__setattr__(self, "init_depths", tuple(float(p) for p in self.init_depths))
        object.__setattr__(self, "lr_scale", tuple(float(x) for x in self.lr_scale))
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.hidden_units < 0:
            raise ValueError("hidden_units must be >= 0")
        if len(self.lr_scale) != 4 or min(self.lr_scale) <= 0:
            raise ValueError("lr_scale needs four positive entries")
        if not 0 <= self.active_iterations <= self.n_iterations:
            raise ValueError("active_iterations out of range")
        if self.window % 2 != 1:
            raise ValueError("window must be odd")

    @property
    def loc_dim(self) -> int:
        return descriptor_dim(self.feature_dim) + self.hidden_units + 1

    @property
    def init_dim(self) -> int:
        return self.init_along * len(self.init_depths) * self.feature_dim + 1

    @property
    def deform_dim(self) -> int:
        return 2 * len(self.profile) * self.feature_dim + 1


PARAM_NAMES = ("loc_weights", "box_reg_weights", "init_reg_weights", "deform_weights")


@dataclass
class LossBreakdown:
    l_det: float
    l_cin: float
    l_cdn: float
    total: float
    l_cdn_terms: tuple[float, ...] = ()


@dataclass
class Candidate:
    box: Box
    polygon: Polygon
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if len(self.polygon) < 4:
            raise ValueError("candidate polygon needs >= 4 vertices")


@dataclass
class DetectorState:
    config: DetectorConfig
    loc_weights: np.ndarray
    box_reg_weights: np.ndarray
    init_reg_weights: np.ndarray
    deform_weights: np.ndarray

    def __post_init__(self):
        c = self.config
        shapes = {
            "loc_weights": (c.loc_dim,),
            "box_reg_weights": (4, c.loc_dim),
            "init_reg_weights": (2, c.init_dim),
            "deform_weights": (c.n_iterations, 2, c.deform_dim),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)

    @classmethod
    def zeros(cls, config: DetectorConfig | None = None) -> DetectorState:
        c = config or DetectorConfig()
        return cls(
            c,
            np.zeros(c.loc_dim),
            np.zeros((4, c.loc_dim)),
            np.zeros((2, c.init_dim)),
            np.zeros((c.n_iterations, 2, c.deform_dim)),
        )

    @classmethod
    def initial(cls, config: DetectorConfig | None = None) -> DetectorState:
        """Zero weights except priors on the biases: 0.1 heatmap score, square boxes of four blocks."""
        st = cls.zeros(config)
        st.loc_weights[-1] = -math.log((1 - 0.1) / 0.1)
        st.box_reg_weights[:2, -1] = 4.0 * st.config.stride
        return st

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def with_params(self, params: dict[str, np.ndarray]) -> DetectorState:
        return DetectorState(self.config, **{n: params[n] for n in PARAM_NAMES})

    def copy(self) -> DetectorState:
        return self.with_params({n: a.copy() for n, a in self.params().items()})

    # the detector interface used by the EM engine
    def infer(self, img, score_floor: float = 0.0) -> list[Candidate]:
        return infer(self, img, score_floor)

    def contour_from_box(self, img, box: Box) -> Polygon:
        return contour_from_box(self, img, box)

    # -- serialization --------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "format": "polyem-detector/1",
            "config": asdict(self.config),
            "params": {n: getattr(self, n).tolist() for n in PARAM_NAMES},
        }

    @classmethod
    def from_json(cls, doc: dict) -> DetectorState:
        cfg = dict(doc["config"])
        cfg["loss"] = LossConfig(**cfg["loss"])
        config = DetectorConfig(**cfg)
        return cls(config, **{n: np.asarray(doc["params"][n], dtype=np.float64) for n in PARAM_NAMES})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> DetectorState:
        return cls.from_json(json.loads(Path(path).read_text()))


# -- numerics -------------------------------------------------------------------


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _smooth_l1(d: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    a = np.abs(d)
    quad = a < beta
    val = np.where(quad, 0.5 * d * d / beta, a - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d))
    return val, grad


def _with_bias(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


# -- contour stages ---------------------------------------------------------------


def _side_geometry(boxes: np.ndarray):
    """Per box: midpoints (K,4,2), half edge length along each side, perpendicular extent."""
    x0, y0, x1, y1 = boxes.T
    w, h = x1 - x0, y1 - y0
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    mids = np.stack(
        [np.stack([cx, y0], 1), np.stack([x1, cy], 1), np.stack([cx, y1], 1), np.stack([x0, cy], 1)],
        axis=1,
    )
    half_len = np.stack([w, h, w, h], axis=1) / 2
    perp = np.stack([h, w, h, w], axis=1)
    return mids, half_len, perp


def _init_design(cfg: DetectorConfig, feats: np.ndarray, boxes: np.ndarray):
    mids, half_len, perp = _side_geometry(boxes)
    u = np.linspace(-1.0, 1.0, cfg.init_along)
    v = np.asarray(cfg.init_depths)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    uu, vv = uu.ravel(), vv.ravel()
    pts = (
        mids[:, :, None, :]
        + (uu[None, None, :] * half_len[:, :, None])[..., None] * _TANGENT[None, :, None, :]
        + (vv[None, None, :] * perp[:, :, None])[..., None] * _INWARD[None, :, None, :]
    )
    sampled = bilinear(feats, pts)  # (K, 4, S, F)
    x = _with_bias(sampled.reshape(len(boxes), 4, -1))
    return x, mids, half_len, perp


def _init_forward(cfg, w_init, design):
    x, mids, half_len, perp = design
    raw = x @ w_init.T  # (K, 4, 2): along-edge and inward, normalised
    du = np.clip(raw[..., 0], -1.0, 1.0)
    dv = np.clip(raw[..., 1], 0.0, cfg.init_max_depth)
    ext = (
        mids
        + (du * half_len)[..., None] * _TANGENT[None]
        + (dv * perp)[..., None] * _INWARD[None]
    )
    masks = (
        (raw[..., 0] > -1.0) & (raw[..., 0] < 1.0),
        (raw[..., 1] > 0.0) & (raw[..., 1] < cfg.init_max_depth),
    )
    return ext, masks


def _frames(contours: np.ndarray):
    t = np.roll(contours, -1, axis=1) - np.roll(contours, 1, axis=1)
    t /= np.maximum(np.linalg.norm(t, axis=-1, keepdims=True), 1e-12)
    n = np.stack([t[..., 1], -t[..., 0]], axis=-1)  # outward for ccw storage
    return t, n


def _deform_design(cfg: DetectorConfig, feats: np.ndarray, contours: np.ndarray):
    t, n = _frames(contours)
    prof = np.asarray(cfg.profile)
    pts = contours[:, :, None, :] + prof[None, None, :, None] * n[:, :, None, :]
    own = bilinear(feats, pts).reshape(contours.shape[0], contours.shape[1], -1)
    half = cfg.window // 2
    wrapped = np.concatenate([own[:, -half - 1 :], own, own[:, :half]], axis=1)
    csum = np.cumsum(wrapped, axis=1)
    ctx = (csum[:, cfg.window :] - csum[:, : -cfg.window]) / cfg.window
    return _with_bias(np.concatenate([own, ctx], axis=-1)), t, n


def _deform_step(cfg, w_t, design, contours, limits):
    x, t, n = design
    raw = x @ w_t.T  # (K, P, 2): normal and tangential offsets
    lim = limits[:, None]
    a = np.clip(raw[..., 0], -lim, lim)
    b = np.clip(raw[..., 1], -lim, lim)
    out = contours + a[..., None] * n + b[..., None] * t
    masks = (np.abs(raw[..., 0]) < lim, np.abs(raw[..., 1]) < lim)
    return out, masks


def _limits(cfg, boxes: np.ndarray) -> np.ndarray:
    return cfg.offset_clamp * np.hypot(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])


def _initial_contours(cfg, boxes: np.ndarray, ext: np.ndarray) -> np.ndarray:
    out = np.empty((len(boxes), cfg.n_points, 2))
    for k, (b, e) in enumerate(zip(boxes, ext)):
        box = Box(*b)
        octagon = octagon_from_extremes(e, box)
        out[k] = resample_contour(octagon, cfg.n_points, start=e[0])
    return out


def _evolve(state: DetectorState, feats: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    cfg = state.config
    ext, _ = _init_forward(cfg, state.init_reg_weights, _init_design(cfg, feats, boxes))
    contours = _initial_contours(cfg, boxes, ext)
    limits = _limits(cfg, boxes)
    for it in range(cfg.active_iterations):
        design = _deform_design(cfg, feats, contours)
        contours, _ = _deform_step(cfg, state.deform_weights[it], design, contours, limits)
    return contours


def _finalize(cfg: DetectorConfig, contour: np.ndarray, box: Box) -> Polygon:
    f = cfg.output_extent - 1.0
    lim = expand_box(box, f, f)
    c = contour.copy()
    c[:, 0] = np.clip(c[:, 0], lim.x_min, lim.x_max)
    c[:, 1] = np.clip(c[:, 1], lim.y_min, lim.y_max)
    return repair_contour(c)


def _memo(img, key, compute):
    if hasattr(img, "derived"):
        return img.derived(key, compute)
    return compute(img)


def _image_features(img) -> np.ndarray:
    return _memo(img, "standardized", lambda im: standardize(im.features))


def _descriptors(cfg: DetectorConfig, img) -> np.ndarray:
    """Per-block descriptors of the score map, (Hb, Wb, loc_dim - 1)."""
    pooled = _memo(
        img,
        ("pooled", cfg.stride),
        lambda im: standardize(block_mean(cell_descriptors(_image_features(im)), cfg.stride)),
    )
    if cfg.hidden_units == 0:
        return pooled
    # float32 keeps the per-image memo small; the heads still run in float64
    return _memo(
        img,
        ("expanded", cfg.stride, cfg.hidden_units, cfg.backbone_seed),
        lambda im: standardize(expand(pooled, cfg.hidden_units, cfg.backbone_seed)).astype(np.float32),
    )


def _block_centers(n: int, stride: int) -> np.ndarray:
    starts = block_edges(n, stride)
    return (starts + np.minimum(starts + stride, n)) / 2.0


def _check_dim(state: DetectorState, img) -> None:
    if img.feature_dim != state.config.feature_dim:
        raise ValueError(
            f"image has {img.feature_dim} feature channels, detector expects {state.config.feature_dim}"
        )


def contour_from_boxes(state: DetectorState, img, boxes) -> list[Polygon]:
    _check_dim(state, img)
    clipped = [b.clip_to(img.width, img.height) for b in boxes]
    for b in clipped:
        if b.is_degenerate:
            raise GeometryError(f"degenerate box {b}")
    if not clipped:
        return []
    feats = _image_features(img)
    arr = np.array([b.as_list() for b in clipped])
    contours = _evolve(state, feats, arr)
    return [_finalize(state.config, c, b) for c, b in zip(contours, clipped)]


def contour_from_box(state: DetectorState, img, box: Box) -> Polygon:
    return contour_from_boxes(state, img, [box])[0]


def heatmap(state: DetectorState, img, descriptors: np.ndarray | None = None) -> np.ndarray:
    d = _descriptors(state.config, img) if descriptors is None else descriptors
    w = state.loc_weights
    return _sigmoid(d @ w[:-1] + w[-1])


def find_peaks(scores: np.ndarray, score_floor: float, max_peaks: int) -> list[tuple[int, int]]:
    """Cells that equal their 3x3 maximum and are not flat plateaus."""
    mx = maximum_filter(scores, size=3, mode="nearest")
    mn = minimum_filter(scores, size=3, mode="nearest")
    ok = (scores == mx) & (scores > mn) & (scores >= score_floor)
    ii, jj = np.nonzero(ok)
    order = np.lexsort((jj, ii, -scores[ii, jj]))[:max_peaks]
    return [(int(ii[k]), int(jj[k])) for k in order]


def infer(state: DetectorState, img, score_floor: float = 0.0) -> list[Candidate]:
    _check_dim(state, img)
    cfg = state.config
    feats = _image_features(img)
    desc = _descriptors(cfg, img)
    scores = heatmap(state, img, desc)
    peaks = find_peaks(scores, score_floor, cfg.max_detections)
    boxes, kept = [], []
    bx, by = _block_centers(img.width, cfg.stride), _block_centers(img.height, cfg.stride)
    for i, j in peaks:
        reg = state.box_reg_weights @ np.append(desc[i, j], 1.0)
        w = float(np.clip(reg[0], cfg.min_box, img.width))
        h = float(np.clip(reg[1], cfg.min_box, img.height))
        half = cfg.stride / 2.0
        cx = bx[j] + float(np.clip(reg[2], -half, half))
        cy = by[i] + float(np.clip(reg[3], -half, half))
        b = Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2).clip_to(img.width, img.height)
        if b.is_degenerate:
            continue
        boxes.append(b)
        kept.append(float(scores[i, j]))
    if not boxes:
        return []
    contours = _evolve(state, feats, np.array([b.as_list() for b in boxes]))
    out = []
    for c, b, s in zip(contours, boxes, kept):
        try:
            poly = _finalize(cfg, c, b)
        except GeometryError:
            continue
        if len(poly) >= 4:
            out.append(Candidate(b, poly, s))
    out.sort(key=lambda c: -c.score)
    return out


# -- training -------------------------------------------------------------------


def pretrain_loose_augmentation(box: Box, rng_seed) -> Box:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    fx, fy = rng.uniform(0.0, 0.2, size=2)
    return expand_box(box, float(fx), float(fy))


def _center_cell(box: Box, n_rows: int, n_cols: int, stride: int) -> tuple[int, int]:
    """Score-map block holding the box centre."""
    cx, cy = box.center
    i = min(max(int(math.floor(cy / stride)), 0), n_rows - 1)
    j = min(max(int(math.floor(cx / stride)), 0), n_cols - 1)
    return i, j


@dataclass
class _ImageCache:
    """Inputs held fixed while differentiating one image's loss."""

    boxes: np.ndarray  # (K, 4) boxes fed to the contour stages
    init_design: tuple | None
    deform_inputs: list  # per iteration: (contours, design)


def _prepare(state: DetectorState, img, polys, rng) -> _ImageCache:
    cfg = state.config
    boxes = []
    for p in polys:
        b = bbox_of_polygon(p)
        if cfg.loose_augmentation:
            b = pretrain_loose_augmentation(b, rng)
        boxes.append(b.clip_to(img.width, img.height).as_list())
    boxes = np.array(boxes).reshape(-1, 4)
    if not len(boxes):
        return _ImageCache(boxes, None, [])
    feats = _image_features(img)
    init_design = _init_design(cfg, feats, boxes)
    ext, _ = _init_forward(cfg, state.init_reg_weights, init_design)
    contours = _initial_contours(cfg, boxes, ext)
    limits = _limits(cfg, boxes)
    inputs = []
    for it in range(cfg.active_iterations):
        design = _deform_design(cfg, feats, contours)
        inputs.append((contours, design))
        contours, _ = _deform_step(cfg, state.deform_weights[it], design, contours, limits)
    return _ImageCache(boxes, init_design, inputs)


def _image_loss(state: DetectorState, img, polys, conf, cache: _ImageCache, want_grad: bool):
    cfg, lc = state.config, state.config.loss
    desc = _descriptors(cfg, img)
    h, w = desc.shape[:2]
    phi = desc.reshape(h * w, -1)
    bx, by = _block_centers(img.width, cfg.stride), _block_centers(img.height, cfg.stride)
    conf = np.asarray(conf, dtype=np.float64)
    k = len(polys)
    grads = {n: np.zeros_like(getattr(state, n)) for n in PARAM_NAMES} if want_grad else None

    # localization: penalty-reduced focal loss on a gaussian centre heatmap
    z = phi @ state.loc_weights[:-1] + state.loc_weights[-1]
    tboxes = [bbox_of_polygon(p) for p in polys]
    ys, xs = np.meshgrid(by, bx, indexing="ij")
    ys, xs = ys.ravel(), xs.ravel()
    target = np.zeros(h * w)
    pos = np.zeros(h * w, dtype=bool)
    weight = np.ones(h * w)
    centers = []
    cells = [_center_cell(b, h, w, cfg.stride) for b in tboxes]
    for b, (i, j) in zip(tboxes, cells):
        centers.append((bx[j], by[i]))
        sigma = max(math.sqrt(b.width * b.height) / 6.0, cfg.stride / 2.0)
        g = np.exp(-((xs - bx[j]) ** 2 + (ys - by[i]) ** 2) / (2 * sigma * sigma))
        target = np.maximum(target, g)
        pos[i * w + j] = True
    if k:
        c = np.asarray(centers)
        dist = (xs[:, None] - c[None, :, 0]) ** 2 + (ys[:, None] - c[None, :, 1]) ** 2
        nearest = dist == dist.min(axis=1, keepdims=True)
        weight = nearest @ conf
    gamma, beta = lc.focal_gamma, lc.focal_beta
    p = _sigmoid(z)
    log_p = -np.logaddexp(0.0, -z)
    log_q = -np.logaddexp(0.0, z)
    q = 1.0 - p
    neg_w = (1.0 - target) ** beta
    loss_cell = np.where(pos, -(q**gamma) * log_p, -neg_w * p**gamma * log_q)
    l_focal = float(weight @ loss_cell)

    l_size = l_off = 0.0
    if k:
        rows = np.array([i * w + j for i, j in cells])
        phi_c = _with_bias(phi[rows])
        pred = phi_c @ state.box_reg_weights.T
        true = np.array(
            [[b.width, b.height, b.center.x - cx, b.center.y - cy] for b, (cx, cy) in zip(tboxes, centers)]
        )
        diff = pred - true
        l_size = float(conf @ np.abs(diff[:, :2]).sum(axis=1))
        l_off = float(conf @ np.abs(diff[:, 2:]).sum(axis=1))
    l_det = l_focal + lc.size_weight * l_size + lc.offset_weight * l_off

    if want_grad:
        dz = np.where(
            pos,
            q**gamma * (gamma * p * log_p - q),
            neg_w * p**gamma * (p - gamma * q * log_q),
        )
        wdz = weight * dz
        grads["loc_weights"] = np.append(phi.T @ wdz, wdz.sum())
        if k:
            head_w = np.array([lc.size_weight] * 2 + [lc.offset_weight] * 2)
            grads["box_reg_weights"] = (np.sign(diff) * conf[:, None] * head_w).T @ phi_c

    l_cin = 0.0
    l_cdn_terms = [0.0] * cfg.active_iterations
    if k:
        beta1 = lc.smooth_l1_beta
        ext, (mask_u, mask_v) = _init_forward(cfg, state.init_reg_weights, cache.init_design)
        x_init, _, half_len, perp = cache.init_design
        true_ext = np.stack([extreme_points(pp).as_array() for pp in polys])
        # offset errors in each side's frame, normalised by the box extent
        diff = ext - true_ext
        e_u = np.einsum("ksd,sd->ks", diff, _TANGENT) / half_len
        e_v = np.einsum("ksd,sd->ks", diff, _INWARD) / perp
        val_u, g_u = _smooth_l1(e_u, beta1)
        val_v, g_v = _smooth_l1(e_v, beta1)
        per = (val_u.sum(axis=1) + val_v.sum(axis=1)) / 8.0
        l_cin = float(conf @ per)
        if want_grad:
            g_u = g_u * mask_u * (conf / 8.0)[:, None]
            g_v = g_v * mask_v * (conf / 8.0)[:, None]
            grads["init_reg_weights"] = lc.lambda1 * np.stack(
                [np.einsum("ks,ksd->d", g_u, x_init), np.einsum("ks,ksd->d", g_v, x_init)]
            )

        gt = np.stack([resample_contour(pp, cfg.n_points) for pp in polys])
        limits = _limits(cfg, cache.boxes)
        npt = cfg.n_points * 2
        for it in range(cfg.active_iterations):
            contours, design = cache.deform_inputs[it]
            out, (mask_a, mask_b) = _deform_step(cfg, state.deform_weights[it], design, contours, limits)
            x_def, t_def, n_def = design
            val, g = _smooth_l1(out - gt, beta1)
            l_cdn_terms[it] = float(conf @ val.reshape(k, -1).mean(axis=1))
            if want_grad:
                g = g * (conf / npt)[:, None, None]
                g_a = np.einsum("kpd,kpd->kp", g, n_def) * mask_a
                g_b = np.einsum("kpd,kpd->kp", g, t_def) * mask_b
                grads["deform_weights"][it] = lc.lambda2 * np.stack(
                    [np.einsum("kp,kpd->d", g_a, x_def), np.einsum("kp,kpd->d", g_b, x_def)]
                )
    return l_det, l_cin, l_cdn_terms, grads


def _normalize_batch(batch):
    out = []
    for img, items in batch:
        polys = [as_poly for as_poly, _ in items]
        conf = [float(s) for _, s in items]
        if any(not 0.0 <= s <= 1.0 for s in conf):
            raise ValueError("confidences must lie in [0, 1]")
        out.append((img, polys, conf))
    return out


def prepare_batch(state: DetectorState, batch, rng=None) -> list[_ImageCache]:
    """Fix the contour-stage inputs (augmented boxes, evolved contours) for a batch."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return [_prepare(state, img, polys, rng) for img, polys, _ in _normalize_batch(batch)]


def loss_and_grads(state: DetectorState, batch, caches=None, rng=None, want_grad=True, use_confidence=True):
    """Batch loss (mean over images) and its gradient with the caches held fixed."""
    items = _normalize_batch(batch)
    if caches is None:
        caches = prepare_batch(state, batch, rng)
    n = max(len(items), 1)
    tot_det = tot_cin = 0.0
    tot_cdn = np.zeros(state.config.active_iterations)
    grads = {name: np.zeros_like(getattr(state, name)) for name in PARAM_NAMES}
    for (img, polys, conf), cache in zip(items, caches):
        _check_dim(state, img)
        if not use_confidence:
            conf = [1.0] * len(conf)
        l_det, l_cin, l_cdn, g = _image_loss(state, img, polys, conf, cache, want_grad)
        tot_det += l_det
        tot_cin += l_cin
        tot_cdn += l_cdn
        if want_grad:
            for name in PARAM_NAMES:
                grads[name] += g[name]
    lc = state.config.loss
    l_det, l_cin = tot_det / n, tot_cin / n
    terms = tuple(float(t) / n for t in tot_cdn)
    l_cdn = float(sum(terms))
    total = l_det + lc.lambda1 * l_cin + lc.lambda2 * l_cdn
    for name in PARAM_NAMES:
        grads[name] /= n
    bd = LossBreakdown(l_det, l_cin, l_cdn, total, terms)
    return bd, (grads if want_grad else None)


def train_step(state: DetectorState, batch, lr: float, rng=None, use_confidence=True):
    """One SGD step on the confidence-weighted composite loss.

    ``batch`` is a list of ``(image, [(polygon, confidence), ...])``.
    Returns the updated state and the loss before the step.
    """
    bd, grads = loss_and_grads(state, batch, rng=rng, use_confidence=use_confidence)
    if not math.isfinite(bd.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingError(f"non-finite loss {bd.total}")
    scale = state.config.lr_scale
    new = {n: getattr(state, n) - (lr * k) * grads[n] for n, k in zip(PARAM_NAMES, scale)}
    return state.with_params(new), bd


def with_config(state: DetectorState, **changes) -> DetectorState:
    return DetectorState(replace(state.config, **changes), **state.params())
