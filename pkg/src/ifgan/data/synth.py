"""Procedural face corpus with separately controlled identity and expression.

Identity factors (face oval, eye spacing, skin level, nose length, head pose)
are drawn once per identity; expression factors (mouth curvature and
openness, eye openness, brow angle) are a fixed function of the expression
class and intensity level.  The three keypoints of every face form a
triangle similar to the canonical alignment triangle, so alignment is exact
up to resampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEUTRAL = -1
MIN_SIDE = 32
EXPRESSION_NAMES = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")

# (mouth_curve, mouth_open, eye_open, brow_angle) offsets at full intensity
_EXPRESSION_TABLE = np.array([
    [-0.45, 0.00, -0.35, -1.00],  # anger
    [-0.80, 0.25, -0.55, -0.45],  # disgust
    [-0.30, 0.65, 0.55, 0.85],  # fear
    [1.00, 0.35, -0.25, 0.00],  # happiness
    [-0.85, 0.00, -0.30, 0.60],  # sadness
    [0.00, 1.00, 0.75, 1.00],  # surprise
])

# eye-to-nose drop over eye distance in the canonical triangle
NOSE_DROP_RATIO = 0.25 / 0.4


@dataclass(frozen=True)
class IdentityFactors:
    oval_w: float  # semi-axes, fraction of side
    oval_h: float
    eye_spacing: float
    base_intensity: float
    nose_length: float
    rotation_deg: float
    scale: float
    shift: tuple[float, float]


@dataclass(frozen=True)
class ExpressionFactors:
    mouth_curve: float
    mouth_open: float
    eye_open: float
    brow_angle: float


@dataclass
class FaceSample:
    image: np.ndarray  # uint8 [S, S]
    identity_id: int
    expression_label: int  # NEUTRAL for the neutral face
    intensity_level: int  # 0 for neutral, otherwise 1..levels
    keypoints: np.ndarray  # [3, 2] (x, y): left eye, right eye, nose tip
    path: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def is_neutral(self) -> bool:
        return self.expression_label == NEUTRAL


def expression_offsets(num_classes: int) -> np.ndarray:
    if num_classes <= len(_EXPRESSION_TABLE):
        return _EXPRESSION_TABLE[:num_classes]
    extra = np.random.default_rng(1000 + num_classes).uniform(-1, 1, size=(num_classes - 6, 4))
    return np.vstack([_EXPRESSION_TABLE, extra])


def expression_factors(label: int, level: int, levels: int, num_classes: int) -> ExpressionFactors:
    if label == NEUTRAL:
        delta = np.zeros(4)
    else:
        if not 0 <= label < num_classes:
            raise ValueError(f"expression label {label} outside [0, {num_classes})")
        delta = expression_offsets(num_classes)[label] * (level / levels)
    return ExpressionFactors(
        mouth_curve=float(delta[0]),
        mouth_open=float(max(delta[1], 0.0)),
        eye_open=float(1.0 + 0.8 * delta[2]),
        brow_angle=float(delta[3]),
    )


def identity_factors(identity: int, seed: int, affinity: float | None = None) -> IdentityFactors:
    """Draw the factors of one identity.

    ``affinity`` in [0, 1], when given, pins the oval width and skin level
    to that value instead of drawing them; it is used to build corpora with
    an identity/expression shortcut.
    """
    rng = np.random.default_rng([seed, identity, 7])
    u = rng.uniform(size=9)
    oval_w = 0.235 + 0.065 * u[0]
    base = 105.0 + 100.0 * u[3]
    if affinity is not None:
        oval_w = 0.235 + 0.065 * affinity
        base = 105.0 + 100.0 * affinity
    return IdentityFactors(
        oval_w=float(oval_w),
        oval_h=float(0.32 + 0.07 * u[1]),
        eye_spacing=float(0.28 + 0.06 * u[2]),
        base_intensity=float(base),
        nose_length=float(0.07 + 0.09 * u[4]),
        rotation_deg=float(-12.0 + 24.0 * u[5]),
        scale=float(0.85 + 0.2 * u[6]),
        shift=(float(-0.05 + 0.1 * u[7]), float(-0.05 + 0.1 * u[8])),
    )


def _pose(idf: IdentityFactors, side: int):
    th = np.deg2rad(idf.rotation_deg)
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    centre = np.array([(0.5 + idf.shift[0]) * (side - 1), (0.5 + idf.shift[1]) * (side - 1)])
    return R, centre, idf.scale * side


def _local_keypoints(idf: IdentityFactors) -> np.ndarray:
    e = idf.eye_spacing
    eye_y = -0.10
    return np.array([[-e / 2, eye_y], [e / 2, eye_y], [0.0, eye_y + NOSE_DROP_RATIO * e]])


def face_keypoints(idf: IdentityFactors, side: int) -> np.ndarray:
    R, c, s = _pose(idf, side)
    return _local_keypoints(idf) @ R.T * s + c


def _coverage(d_px: np.ndarray) -> np.ndarray:
    """Anti-aliased coverage from a signed distance in pixels."""
    return np.clip(0.5 - d_px, 0.0, 1.0)


def _segment_distance(u, v, a, b):
    ab = b - a
    t = np.clip(((u - a[0]) * ab[0] + (v - a[1]) * ab[1]) / (ab @ ab), 0.0, 1.0)
    return np.hypot(u - (a[0] + t * ab[0]), v - (a[1] + t * ab[1]))


def render_face(idf: IdentityFactors, exf: ExpressionFactors, side: int,
                rng: np.random.Generator | None = None, noise: float = 1.0) -> np.ndarray:
    """Rasterize one face into a uint8 [side, side] image."""
    if side < MIN_SIDE:
        raise ValueError(f"side {side} too small to render faces (minimum {MIN_SIDE})")
    R, c, s = _pose(idf, side)
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    # pixel -> face-local coordinates (units of `s` pixels)
    dx, dy = xs - c[0], ys - c[1]
    u = (R[0, 0] * dx + R[1, 0] * dy) / s
    v = (R[0, 1] * dx + R[1, 1] * dy) / s
    px = lambda d: d * s  # local distance -> pixels

    img = np.full((side, side), 24.0)
    skin = idf.base_intensity
    a, b = idf.oval_w, idf.oval_h
    r = np.sqrt((u / a) ** 2 + ((v - 0.03) / b) ** 2)
    img += (skin - img) * _coverage(px((r - 1.0) * min(a, b)))

    kp = _local_keypoints(idf)
    dark = 0.25 * skin
    eye_w, eye_h = 0.055, max(0.024 * exf.eye_open, 0.004)
    for ex, ey in kp[:2]:
        re = np.sqrt(((u - ex) / eye_w) ** 2 + ((v - ey) / eye_h) ** 2)
        img += (dark - img) * _coverage(px((re - 1.0) * eye_h))

    brow_y = kp[0, 1] - 0.075
    tilt = 0.035 * exf.brow_angle
    for side_sign, (ex, _) in zip((-1, 1), kp[:2]):
        inner = np.array([ex - side_sign * 0.055, brow_y - tilt])
        outer = np.array([ex + side_sign * 0.06, brow_y + tilt])
        d = _segment_distance(u, v, inner, outer) - 0.012
        img += (0.35 * skin - img) * _coverage(px(d))

    tip = kp[2]
    d = _segment_distance(u, v, tip - np.array([0.0, idf.nose_length]), tip) - 0.01
    img += (0.6 * skin - img) * _coverage(px(d))

    half_w = 0.11
    mouth_y = tip[1] + 0.095
    t = np.clip(u / half_w, -1.0, 1.0)
    centre_line = mouth_y + 0.045 * exf.mouth_curve * (1.0 - 2.0 * t * t)
    half_th = 0.011 + 0.045 * exf.mouth_open * (1.0 - t * t)
    d = np.maximum(np.abs(v - centre_line) - half_th, np.abs(u) - half_w)
    img += (0.2 * skin - img) * _coverage(px(d))

    if rng is not None:
        # per-capture illumination: global gain and a linear light gradient
        gain = rng.uniform(0.8, 1.2)
        phi = rng.uniform(0.0, 2 * np.pi)
        slope = rng.uniform(0.0, 0.35)
        ramp = ((xs - side / 2) * np.cos(phi) + (ys - side / 2) * np.sin(phi)) / side
        img = img * gain * (1.0 + slope * ramp)
        if noise > 0:
            img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def synth_corpus(n_identities: int = 20, num_classes: int = 6, levels: int = 4, side: int = 64,
                 seed: int = 0, affinity: bool = False) -> list[FaceSample]:
    """One neutral face plus num_classes * levels expressive faces per identity.

    With ``affinity=True`` identity ``i`` gets oval width and skin level
    fixed by ``i mod num_classes``; see :func:`spurious_training_subset`.
    """
    if n_identities < 2:
        raise ValueError(f"need at least 2 identities, got {n_identities}")
    if num_classes < 2:
        raise ValueError(f"need at least 2 expression classes, got {num_classes}")
    if levels < 1:
        raise ValueError(f"need at least 1 intensity level, got {levels}")
    if side < MIN_SIDE:
        raise ValueError(f"side {side} too small to render faces (minimum {MIN_SIDE})")
    samples = []
    for ident in range(n_identities):
        aff = (ident % num_classes) / (num_classes - 1) if affinity else None
        idf = identity_factors(ident, seed, aff)
        kps = face_keypoints(idf, side)
        combos = [(NEUTRAL, 0)] + [(k, lv) for k in range(num_classes) for lv in range(1, levels + 1)]
        for label, level in combos:
            rng = np.random.default_rng([seed, ident, label + 1, level, 11])
            exf = expression_factors(label, level, levels, num_classes)
            samples.append(FaceSample(
                image=render_face(idf, exf, side, rng),
                identity_id=ident,
                expression_label=label,
                intensity_level=level,
                keypoints=kps.copy(),
            ))
    return samples


def affinity_class(identity_id: int, num_classes: int) -> int:
    return identity_id % num_classes


def spurious_training_subset(samples: list[FaceSample], train_ids, num_classes: int,
                             keep_other: float = 0.2, seed: int = 0) -> list[FaceSample]:
    """Thin out training identities so their look predicts their expression.

    Each training identity keeps all samples of its affinity class, its
    neutral face, and a ``keep_other`` fraction of the remaining expressive
    samples.  Samples of other identities pass through untouched.
    """
    train_ids = set(train_ids)
    rng = np.random.default_rng([seed, 23])
    out = []
    for s in samples:
        if s.identity_id not in train_ids or s.is_neutral:
            out.append(s)
            continue
        if s.expression_label == affinity_class(s.identity_id, num_classes) or rng.uniform() < keep_other:
            out.append(s)
    return out
