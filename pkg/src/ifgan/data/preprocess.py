"""Face alignment, histogram equalization, augmentation and average faces.

Coordinates are (x, y) with pixel centres at integer positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synth import NEUTRAL, FaceSample

ROTATION_RANGE_DEG = 3.0


def canonical_keypoints(side: int) -> np.ndarray:
    """Eyes at (0.3, 0.35) and (0.7, 0.35), nose tip at (0.5, 0.6), in units of side."""
    return np.array([[0.3, 0.35], [0.7, 0.35], [0.5, 0.6]]) * side


@dataclass(frozen=True)
class Similarity:
    """x -> [[a, -b], [b, a]] @ x + t (rotation, uniform scale, translation)."""

    a: float
    b: float
    tx: float
    ty: float

    @property
    def scale(self) -> float:
        return float(np.hypot(self.a, self.b))

    @property
    def angle(self) -> float:
        return float(np.arctan2(self.b, self.a))

    def matrix(self) -> np.ndarray:
        return np.array([[self.a, -self.b], [self.b, self.a]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.matrix().T + np.array([self.tx, self.ty])

    def inverse(self) -> "Similarity":
        s2 = self.a ** 2 + self.b ** 2
        ai, bi = self.a / s2, -self.b / s2
        t = -np.array([[ai, -bi], [bi, ai]]) @ np.array([self.tx, self.ty])
        return Similarity(ai, bi, float(t[0]), float(t[1]))

    @classmethod
    def from_params(cls, scale: float, angle: float, tx: float, ty: float) -> "Similarity":
        return cls(scale * np.cos(angle), scale * np.sin(angle), tx, ty)


def estimate_similarity(src: np.ndarray, dst: np.ndarray, collinear_tol: float = 1e-3) -> Similarity:
    """Least-squares similarity mapping ``src`` points onto ``dst`` points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2 or len(src) < 2:
        raise ValueError(f"need matching [n, 2] point sets, got {src.shape} and {dst.shape}")
    if len(src) >= 3:
        d1, d2 = src[1] - src[0], src[2] - src[0]
        area = abs(d1[0] * d2[1] - d1[1] * d2[0]) / 2
        size = max(np.ptp(src[:, 0]), np.ptp(src[:, 1])) ** 2
        if size == 0 or area / size < collinear_tol:
            raise ValueError("keypoints are (nearly) collinear; cannot align")
    n = len(src)
    A = np.zeros((2 * n, 4))
    A[0::2] = np.column_stack([src[:, 0], -src[:, 1], np.ones(n), np.zeros(n)])
    A[1::2] = np.column_stack([src[:, 1], src[:, 0], np.zeros(n), np.ones(n)])
    sol, *_ = np.linalg.lstsq(A, dst.reshape(-1), rcond=None)
    return Similarity(*map(float, sol))


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Sample ``img`` at float coordinates; points outside the image get ``fill``."""
    H, W = img.shape
    img = img.astype(np.float64)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx, fy = xs - x0, ys - y0
    out = np.zeros(xs.shape)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            vals = np.where(ok, img[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)], fill)
            out += wx * wy * vals
    return out


def warp(img: np.ndarray, out_to_src: Similarity, out_shape: tuple[int, int], fill: float = 0.0) -> np.ndarray:
    ys, xs = np.mgrid[0:out_shape[0], 0:out_shape[1]].astype(np.float64)
    pts = out_to_src.apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
    return bilinear_sample(img, pts[:, 0].reshape(out_shape), pts[:, 1].reshape(out_shape), fill)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def align_face(sample: FaceSample | tuple[np.ndarray, np.ndarray], out_side: int,
               canonical: np.ndarray | None = None) -> np.ndarray:
    """Warp a face so its keypoints best match the canonical ones (uint8 output)."""
    if isinstance(sample, FaceSample):
        image, kps = sample.image, sample.keypoints
    else:
        image, kps = sample
    if canonical is None:
        canonical = canonical_keypoints(out_side)
    fwd = estimate_similarity(kps, canonical)
    return to_uint8(warp(image, fwd.inverse(), (out_side, out_side)))


def hist_equalize(image: np.ndarray) -> np.ndarray:
    """v -> round(255 * (cdf(v) - cdf_min) / (count - cdf_min)); constant images map to 0."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise TypeError(f"hist_equalize expects uint8 images, got {image.dtype}")
    hist = np.bincount(image.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    count = image.size
    cdf_min = cdf[hist > 0][0] if count else 0
    if count == cdf_min:
        return np.zeros_like(image)
    lut = np.floor(255.0 * (cdf - cdf_min) / (count - cdf_min) + 0.5)
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[image]


def preprocess(sample: FaceSample, side: int) -> np.ndarray:
    """Alignment followed by histogram equalization."""
    return hist_equalize(align_face(sample, side))


def resize(img: np.ndarray, n: int) -> np.ndarray:
    """Bilinear resize of a square image to n x n (pixel-centre aligned, edge clamped)."""
    H, W = img.shape
    ys = np.clip((np.arange(n) + 0.5) * H / n - 0.5, 0, H - 1)
    xs = np.clip((np.arange(n) + 0.5) * W / n - 0.5, 0, W - 1)
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_sample(img, gx, gy)


def normalize(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 127.5 - 1.0


def denormalize(x: np.ndarray) -> np.ndarray:
    return to_uint8((np.asarray(x, dtype=np.float64) + 1.0) * 127.5)


def augment(image: np.ndarray, mode: str, n: int, m: int,
            rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Resize to n x n, then train: flip/rotate/random m x m crop; test: centre crop.

    Returns a float64 [m, m] array with intensities mapped to [-1, 1].
    """
    if m > n:
        raise ValueError(f"crop size {m} exceeds resized side {n}")
    if mode not in ("train", "test"):
        raise ValueError(f"unknown augmentation mode {mode!r}")
    img = resize(np.asarray(image, dtype=np.float64), n)
    if mode == "test":
        off = (n - m) // 2
        return normalize(img[off:off + m, off:off + m])
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    flip = rng.uniform() < 0.5
    angle = np.deg2rad(rng.uniform(-ROTATION_RANGE_DEG, ROTATION_RANGE_DEG))
    oy, ox = rng.integers(0, n - m + 1, size=2)
    if flip:
        img = img[:, ::-1]
    c = (n - 1) / 2.0
    rot = Similarity.from_params(1.0, angle, 0.0, 0.0)
    t = np.array([c, c]) - rot.apply(np.array([[c, c]]))[0]
    img = warp(img, Similarity(rot.a, rot.b, float(t[0]), float(t[1])), (n, n))
    return normalize(img[oy:oy + m, ox:ox + m])


@dataclass
class AverageFaces:
    """Pixel means of preprocessed training faces: neutral and one per class.

    ``source_identities`` records which identities contributed.
    """

    neutral: np.ndarray
    expressive: list[np.ndarray]
    source_identities: frozenset[int]

    @property
    def num_classes(self) -> int:
        return len(self.expressive)


def average_faces(samples: list[FaceSample], images: list[np.ndarray], num_classes: int,
                  peak_levels: tuple[int, ...] | None = None) -> AverageFaces:
    """Average preprocessed ``images`` (parallel to ``samples``) per class.

    ``peak_levels`` restricts the expressive averages to those intensity
    levels; the neutral average uses every neutral sample.
    """
    if len(samples) != len(images):
        raise ValueError("samples and images must be parallel lists")
    groups: dict[int, list[np.ndarray]] = {NEUTRAL: []}
    groups.update({k: [] for k in range(num_classes)})
    for s, img in zip(samples, images):
        if s.is_neutral:
            groups[NEUTRAL].append(img)
        elif peak_levels is None or s.intensity_level in peak_levels:
            groups[s.expression_label].append(img)
    for k, imgs in groups.items():
        if not imgs:
            name = "neutral" if k == NEUTRAL else f"expression {k}"
            raise ValueError(f"no training images for class {name}")
    mean = lambda imgs: np.mean(np.stack([i.astype(np.float64) for i in imgs]), axis=0)
    return AverageFaces(
        neutral=mean(groups[NEUTRAL]),
        expressive=[mean(groups[k]) for k in range(num_classes)],
        source_identities=frozenset(s.identity_id for s in samples),
    )
