"""Synthetic 2D phantoms with known ground truth.

Every generator is a pure function of its spec and seed. Images are ``(H, W)``
float64 arrays in [0, 1]; label maps are integer arrays; displacements are
``(2, H, W)`` :class:`~srgd.gridmath.Grid` objects in pixel units.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .gridmath import Grid, ShapeError
from .metrics import LandmarkSet, ndv
from .warp import identity_displacement, invert, sample_at, warp_image, warp_labels

# knots (input, output) of the contrast-remapping curve used as "modality B";
# structure intensities 0.2 / 0.5 / 0.8 land on 0.9 / 0.3 / 0.6
MODALITY_B_LUT: tuple[tuple[float, float], ...] = (
    (0.0, 0.1), (0.2, 0.9), (0.5, 0.3), (0.8, 0.6), (1.0, 0.7),
)
IDENTITY_LUT: tuple[tuple[float, float], ...] = ((0.0, 0.0), (1.0, 1.0))

MAX_FOLD_RETRIES = 10


@dataclass(frozen=True)
class BiasSpec:
    n_components: int = 4
    base_amplitude: float = 0.3
    scale: float = 1.0


@dataclass(frozen=True)
class PhantomSpec:
    size: tuple[int, int] = (64, 64)
    n_labels: int = 4
    blob_count: tuple[int, int] = (4, 7)
    blob_radius: tuple[float, float] = (3.5, 7.0)
    intensity_table: tuple[float, ...] | None = None
    noise_sigma: float = 0.02
    seed: int = 0
    n_bodies: int = 1
    clutter: float = 0.0
    n_landmarks: int = 16
    blur: float = 0.6

    def __post_init__(self):
        if self.n_labels < 2:
            raise ValueError("need background plus at least one structure label")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        table = self.table()
        if len(table) != self.n_labels or min(table) < 0 or max(table) > 1:
            raise ValueError("intensity_table needs one value in [0, 1] per label")

    def table(self) -> tuple[float, ...]:
        if self.intensity_table is not None:
            return tuple(self.intensity_table)
        return (0.05,) + tuple(np.linspace(0.2, 0.8, self.n_labels - 1).tolist())


@dataclass
class Sample:
    """One synthetic case with every supervision source the experiments use."""

    img: np.ndarray
    labels: np.ndarray
    onehot: np.ndarray
    landmarks: LandmarkSet
    mask: np.ndarray
    bias_field: np.ndarray
    modality_b: np.ndarray
    base: np.ndarray
    clutter: np.ndarray
    gt_disp: Grid | None = None
    n_labels: int = 0
    sample_id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.img.shape

    def biased(self, scale: float) -> np.ndarray:
        return apply_bias(self.img, scaled_field(self.bias_field, scale))

    def masked(self) -> np.ndarray:
        return self.img * self.mask


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / max(np.abs(f).max(), 1e-12)


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    return (labels[None] == np.arange(k)[:, None, None]).astype(np.float64)


def _body_mask(rng, spec: PhantomSpec) -> np.ndarray:
    h, w = spec.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    wobble = _smooth_noise(rng, (h, w), max(h, w) / 10)
    body = np.zeros((h, w), dtype=bool)
    for b in range(spec.n_bodies):
        cx = w * (b + 1) / (spec.n_bodies + 1) + rng.uniform(-0.03, 0.03) * w
        cy = h / 2 + rng.uniform(-0.04, 0.04) * h
        ry = h * rng.uniform(0.33, 0.39)
        rx = w * rng.uniform(0.33, 0.39) / spec.n_bodies
        q = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        body |= (q + 0.25 * wobble) < 1.0
    return body


def _farthest_points(cands: np.ndarray, seeds: np.ndarray, n: int) -> np.ndarray:
    chosen = [p for p in seeds]
    if not chosen:
        chosen.append(cands[0])
    dist = np.min(np.linalg.norm(cands[:, None] - np.array(chosen)[None], axis=2), axis=1)
    out = []
    for _ in range(n):
        i = int(np.argmax(dist))
        out.append(cands[i])
        dist = np.minimum(dist, np.linalg.norm(cands - cands[i], axis=1))
    return np.array(out).reshape(-1, 2)


def _landmarks(labels: np.ndarray, n_total: int) -> np.ndarray:
    centroids = []
    for lab in np.unique(labels):
        if lab == 0:
            continue
        pts = np.argwhere(labels == lab).astype(np.float64)
        c = pts.mean(axis=0)
        if labels[int(round(c[0])), int(round(c[1]))] != lab:
            c = pts[np.argmin(np.linalg.norm(pts - c, axis=1))]
        centroids.append(c)
    centroids = np.array(centroids).reshape(-1, 2)
    edge = np.zeros(labels.shape, dtype=bool)
    edge[:-1] |= labels[:-1] != labels[1:]
    edge[1:] |= labels[1:] != labels[:-1]
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    edge &= labels > 0
    cands = np.argwhere(edge).astype(np.float64)
    n_edge = max(n_total - len(centroids), 8 - len(centroids), 0)
    extra = _farthest_points(cands, centroids, min(n_edge, len(cands)))
    return np.vstack([centroids, extra])


def make_phantom(spec: PhantomSpec, bias: BiasSpec | None = None,
                 lut: Sequence[tuple[float, float]] = MODALITY_B_LUT) -> Sample:
    """Random blob anatomy with labels, landmarks, ROI mask and bias field."""
    h, w = spec.size
    if h < 8 or w < 8:
        raise ValueError(f"phantom size {spec.size} too small")
    if spec.blob_radius[1] * 2 >= min(h, w):
        raise ValueError("blob radius larger than the image")
    bias = bias or BiasSpec()
    seq = np.random.SeedSequence(spec.seed)
    g_shape, g_noise, g_bias, g_b = (np.random.default_rng(s) for s in seq.spawn(4))

    body = _body_mask(g_shape, spec)
    k = spec.n_labels
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    fields = [np.full((h, w), 0.5)]
    if k > 2:
        fields += [np.zeros((h, w)) for _ in range(k - 2)]
        lo, hi = spec.blob_count
        n_blobs = int(g_shape.integers(lo, hi + 1))
        inside = np.argwhere(ndimage.binary_erosion(body, _disk(2)))
        if len(inside) == 0:
            raise ValueError("body too small for blobs")
        for i in range(n_blobs):
            cy, cx = inside[g_shape.integers(len(inside))]
            r = g_shape.uniform(*spec.blob_radius)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
            f = fields[1 + i % (k - 2)]
            np.maximum(f, bump, out=f)
        for f in fields[1:]:
            f += 0.08 * _smooth_noise(g_shape, (h, w), 3.0)
    labels = np.where(body, np.argmax(np.stack(fields), axis=0) + 1, 0).astype(np.int64)

    table = np.asarray(spec.table())
    base = ndimage.gaussian_filter(table[labels], spec.blur) if spec.blur > 0 else table[labels]
    mask = ndimage.binary_dilation(labels > 0, _disk(2)).astype(np.float64)
    clutter = np.zeros((h, w))
    if spec.clutter > 0:
        tex = _smooth_noise(g_shape, (h, w), 1.5)
        ribs = np.sin(2 * np.pi * (yy / g_shape.uniform(9, 13) + 0.3 * tex))
        clutter = spec.clutter * 0.5 * (tex + ribs)

    img = _render(base, clutter, mask, spec.noise_sigma, g_noise)
    modality_b = _render(modality_transfer(base, lut), clutter, mask, spec.noise_sigma, g_b)
    field = bias_field(spec.size, bias, int(g_bias.integers(2**31)))
    points = _landmarks(labels, spec.n_landmarks)
    return Sample(img=img, labels=labels, onehot=_onehot(labels, k),
                  landmarks=LandmarkSet(points), mask=mask, bias_field=field,
                  modality_b=modality_b, base=base, clutter=clutter, n_labels=k,
                  sample_id=f"s{spec.seed}")


def _render(base, clutter, mask, sigma, rng) -> np.ndarray:
    img = base + clutter * (1.0 - mask)
    if sigma > 0:
        img = img + rng.normal(0.0, sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def random_deformation(seed: int, amplitude: float = 3.0, sigma: float = 8.0,
                       size: tuple[int, int] = (64, 64)) -> Grid:
    """Smooth random displacement with maximum vector length ``amplitude``.

    Folding fields are rejected and regenerated from a new sub-seed.
    """
    if amplitude < 0 or sigma <= 0:
        raise ValueError("amplitude must be >= 0 and sigma > 0")
    h, w = size
    if amplitude == 0:
        return identity_displacement(h, w)
    for attempt in range(MAX_FOLD_RETRIES):
        rng = np.random.default_rng([seed, attempt])
        noise = rng.standard_normal((2, h, w))
        f = np.stack([ndimage.gaussian_filter(c, sigma, mode="reflect") for c in noise])
        f *= amplitude / np.sqrt((f ** 2).sum(axis=0)).max()
        if ndv(f) == 0.0:
            return Grid(f)
    raise RuntimeError(f"deformation kept folding after {MAX_FOLD_RETRIES} tries")


def make_pair(sample: Sample, deform: Grid, rng: np.random.Generator,
              background_deform: Grid | None = None, noise_sigma: float = 0.02,
              bias: BiasSpec | None = None,
              lut: Sequence[tuple[float, float]] = MODALITY_B_LUT) -> tuple[Sample, Sample]:
    """Build a (fixed, moving) pair whose correct registration is ``deform``.

    ``deform`` is the displacement that maps fixed-image positions to their
    anatomical counterparts in the moving image, i.e. the field a perfect
    registration would predict. Clutter outside the mask follows
    ``background_deform`` (static by default).
    """
    if deform.shape[1:] != sample.shape:
        raise ShapeError("deformation and sample sizes differ")
    h, w = sample.shape
    inv = invert(deform)
    inv_bg = identity_displacement(h, w) if background_deform is None else invert(background_deform)
    g_f, g_m, g_fb, g_mb = (np.random.default_rng(int(s)) for s in rng.integers(2**31, size=4))

    def warp2d(a, d):
        return warp_image(Grid(a), d).data

    base_m = warp2d(sample.base, inv)
    labels_m = warp_labels(sample.labels, inv)
    mask_m = warp_labels(sample.mask, inv)
    clutter_m = warp2d(sample.clutter, inv_bg)
    fp = sample.landmarks.points
    mp = fp + sample_at(deform, fp).data.T
    mp = np.clip(mp, 0, [h - 1, w - 1])
    bias = bias or BiasSpec()

    fixed = replace(
        sample,
        img=_render(sample.base, sample.clutter, sample.mask, noise_sigma, g_f),
        modality_b=_render(modality_transfer(sample.base, lut), sample.clutter, sample.mask,
                           noise_sigma, g_fb),
        gt_disp=None, sample_id=sample.sample_id + "f",
    )
    moving = Sample(
        img=_render(base_m, clutter_m, mask_m, noise_sigma, g_m),
        labels=labels_m, onehot=_onehot(labels_m, sample.n_labels),
        landmarks=LandmarkSet(mp, sample.landmarks.spacing), mask=mask_m,
        bias_field=bias_field(sample.shape, bias, int(rng.integers(2**31))),
        modality_b=_render(modality_transfer(base_m, lut), clutter_m, mask_m, noise_sigma,
                           g_mb),
        base=base_m, clutter=clutter_m, gt_disp=deform, n_labels=sample.n_labels,
        sample_id=sample.sample_id + "m",
    )
    return fixed, moving


def bias_field(size: tuple[int, int], spec: BiasSpec, seed: int) -> np.ndarray:
    """``exp(scale * sum_i a_i cos(...))`` with ``sum |a_i| = base_amplitude``."""
    h, w = size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    props = rng.dirichlet(np.ones(spec.n_components))
    signs = rng.choice([-1.0, 1.0], spec.n_components)
    log_field = np.zeros((h, w))
    for a, sgn in zip(props * spec.base_amplitude, signs):
        # at most ~1.4 cycles across the image: periods stay >= half the size
        fy, fx = rng.uniform(-1.0, 1.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        log_field += sgn * a * np.cos(2 * np.pi * (fy * yy / h + fx * xx / w) + phase)
    if spec.scale == 0:
        return np.ones((h, w))
    return np.exp(spec.scale * log_field)


def scaled_field(unit_field: np.ndarray, scale: float) -> np.ndarray:
    """Rescale the strength of a scale-1 field: ``field ** scale``."""
    if scale == 0:
        return np.ones_like(unit_field)
    return np.exp(scale * np.log(unit_field))


def apply_bias(img: np.ndarray, field: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    field = np.asarray(field, dtype=np.float64)
    if img.shape != field.shape:
        raise ShapeError(f"image {img.shape} and field {field.shape} differ")
    if np.any(field <= 0):
        raise ValueError("bias field must be positive")
    return img * field


def modality_transfer(img: np.ndarray,
                      lut: Sequence[tuple[float, float]] = MODALITY_B_LUT) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.min() < 0 or img.max() > 1:
        raise ValueError("modality transfer expects intensities in [0, 1]")
    xs, ys = zip(*lut)
    return np.interp(img, xs, ys)
