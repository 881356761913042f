"""Synthetic specimen generation, heatmap targets, augmentation, dataset I/O.

Each specimen is a curved-spine prawn silhouette rendered over a textured
dark background, bright enough that luminance thresholding separates the
body.  The 12 landmarks follow the anatomical numbering: 1 antennal-scale
tip, 2/3 tail anterior/posterior, 4/6 dorsal/ventral carapace-abdomen
junction, 5 mid-carapace ventral, 7-12 dorsal/ventral midpoints of abdominal
segments 1, 3 and 6.  The canonical pose is horizontal, head left, dorsal
side up; augmentation supplies pose diversity.

Weight follows the allometric law w = a * L^b * (1 + c * relw) * (1 + eps)
with L the spine arc length in millimetres, relw the width-to-length ratio
and eps Gaussian rendering-independent noise.

Determinism: every record draws from its own stream seeded by (seed, id), so
generation order and parallelism cannot change the output.  Landmark
coordinates are quantized to 1/100 px at generation time, which makes the
2-decimal on-disk text format lossless.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError, DatasetError

__all__ = [
    "IMAGE_SIZE",
    "GeneratorConfig",
    "AugmentationConfig",
    "SpecimenRecord",
    "AppliedTransform",
    "generate_specimen",
    "generate_dataset",
    "make_heatmap_targets",
    "augment",
    "split",
    "save_dataset",
    "load_dataset",
]

logger = logging.getLogger(__name__)

IMAGE_SIZE = 320

# Spine stations (fractions of arc length) anchoring anatomy and landmarks.
_T_CARAPACE_MID = 0.285
_T_JUNCTION = 0.45
_T_TAIL = 0.88
_N_SEGMENTS = 6

# Half-width profile along the spine: thin antennal blade, broad carapace,
# tapering abdomen, pointed tail.
_PROFILE_T = np.array([0.00, 0.04, 0.12, 0.20, 0.30, 0.45, 0.55, 0.70, 0.88, 0.96, 1.00])
_PROFILE_V = np.array([0.05, 0.12, 0.22, 0.80, 1.00, 0.95, 0.85, 0.72, 0.52, 0.34, 0.04])


@dataclass
class GeneratorConfig:
    """Ranges and constants driving the specimen generator."""

    length_range_mm: tuple[float, float] = (80.0, 200.0)
    curvature_range: tuple[float, float] = (-0.16, 0.16)
    rel_width_range: tuple[float, float] = (0.16, 0.30)
    allometric_a: float = 7.0e-6  # grams per mm^b
    allometric_b: float = 3.0
    width_coeff: float = 0.5
    noise_sd: float = 0.02
    mm_per_px: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.length_range_mm[0] > self.length_range_mm[1]:
            raise ConfigError("length range is empty")
        if self.rel_width_range[0] > self.rel_width_range[1]:
            raise ConfigError("relative-width range is empty")
        if self.allometric_a <= 0:
            raise ConfigError("allometric a must be positive")
        if not 2.5 <= self.allometric_b <= 3.5:
            raise ConfigError(f"allometric b must be in [2.5, 3.5], got {self.allometric_b}")
        if self.mm_per_px <= 0:
            raise ConfigError("mm_per_px must be positive")


@dataclass
class SpecimenRecord:
    """One sample: image, ground-truth landmarks, weight and scale."""

    id: int
    image: np.ndarray  # (3, 320, 320) float32 in [0, 1]
    landmarks: np.ndarray  # (12, 2) pixel coordinates (x, y)
    weight_g: float
    mm_per_px: float


def _stamp(buf: np.ndarray, cx: float, cy: float, radius: float,
           value: float = 1.0, soft: float = 1.5) -> None:
    """max-blend an antialiased disk into a 2-D buffer."""
    size = buf.shape[0]
    r = radius + soft
    x0, x1 = max(int(cx - r), 0), min(int(cx + r) + 2, size)
    y0, y1 = max(int(cy - r), 0), min(int(cy + r) + 2, size)
    if x0 >= x1 or y0 >= y1:
        return
    yy = np.arange(y0, y1, dtype=np.float64)[:, None] - cy
    xx = np.arange(x0, x1, dtype=np.float64)[None, :] - cx
    dist = np.sqrt(yy * yy + xx * xx)
    alpha = np.clip((radius - dist) / soft + 1.0, 0.0, 1.0) * value
    region = buf[y0:y1, x0:x1]
    np.maximum(region, alpha, out=region)


def _spine_geometry(length_px: float, curvature: float, rng: np.random.Generator):
    """Spine polyline, unit tangents and half-widths at dense t samples."""
    t = np.linspace(0.0, 1.0, 257)
    base = np.stack([t, curvature * np.sin(np.pi * t)], axis=1)
    seg = np.diff(base, axis=0)
    arc = float(np.sum(np.sqrt(np.sum(seg * seg, axis=1))))
    scale = length_px / arc
    pts = base * scale

    span_x = pts[:, 0].max() - pts[:, 0].min()
    span_y = pts[:, 1].max() - pts[:, 1].min()
    margin = 14.0
    free_x = IMAGE_SIZE - 2 * margin - span_x
    free_y = IMAGE_SIZE - 2 * margin - span_y
    ox = margin - pts[:, 0].min() + rng.uniform(0.1, 0.9) * max(free_x, 0.0)
    oy = margin - pts[:, 1].min() + rng.uniform(0.2, 0.8) * max(free_y, 0.0)
    pts = pts + np.array([ox, oy])

    tangents = np.gradient(pts, axis=0)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    return t, pts, tangents


def _interp_point(t: np.ndarray, pts: np.ndarray, tangents: np.ndarray, at: float):
    x = np.interp(at, t, pts[:, 0])
    y = np.interp(at, t, pts[:, 1])
    tx = np.interp(at, t, tangents[:, 0])
    ty = np.interp(at, t, tangents[:, 1])
    norm = np.hypot(tx, ty)
    return np.array([x, y]), np.array([-ty, tx]) / norm


def generate_specimen(rng: np.random.Generator, cfg: GeneratorConfig,
                      specimen_id: int = 0) -> SpecimenRecord:
    """Render one synthetic prawn and its ground truth."""
    length_mm = rng.uniform(*cfg.length_range_mm)
    curvature = rng.uniform(*cfg.curvature_range)
    relw = rng.uniform(*cfg.rel_width_range)
    length_px = length_mm / cfg.mm_per_px

    t, pts, tangents = _spine_geometry(length_px, curvature, rng)
    half_w = 0.5 * relw * length_px * np.interp(t, _PROFILE_T, _PROFILE_V)

    # Background: dark gradient plus grain.
    base = rng.uniform(0.08, 0.18, size=3)
    gdir = rng.uniform(-1.0, 1.0, size=2)
    ramp = np.linspace(-0.5, 0.5, IMAGE_SIZE)
    grad = gdir[0] * ramp[None, :] + gdir[1] * ramp[:, None]
    img = np.empty((3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    for c in range(3):
        img[c] = base[c] + 0.05 * grad
    img += rng.normal(0.0, 0.015, size=img.shape)
    np.clip(img, 0.0, 0.35, out=img)

    # Body silhouette: antialiased disks stamped along the spine.
    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    step = max(length_px / 220.0, 0.8)
    n_stamps = int(length_px / step) + 1
    ts = np.linspace(0.0, 1.0, n_stamps)
    sx = np.interp(ts, t, pts[:, 0])
    sy = np.interp(ts, t, pts[:, 1])
    sw = np.interp(ts, t, half_w)
    for cx, cy, r in zip(sx, sy, sw):
        _stamp(mask, cx, cy, r)

    # Dark details: segment boundary lines, junction line, eye.
    detail = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for i in range(_N_SEGMENTS + 1):
        tb = _T_JUNCTION + (_T_TAIL - _T_JUNCTION) * i / _N_SEGMENTS
        p, normal = _interp_point(t, pts, tangents, tb)
        hw = float(np.interp(tb, t, half_w))
        for offset in np.linspace(-hw * 0.9, hw * 0.9, max(int(hw * 1.8), 4)):
            q = p + normal * offset
            _stamp(detail, q[0], q[1], 1.1, value=0.55, soft=1.0)
    eye_p, eye_n = _interp_point(t, pts, tangents, 0.16)
    eye = eye_p - eye_n * 0.45 * float(np.interp(0.16, t, half_w))
    _stamp(detail, eye[0], eye[1], 2.4, value=0.9, soft=1.0)

    body = np.array([0.86, 0.72, 0.62]) * rng.uniform(0.95, 1.05)
    shading = 1.0 - 0.35 * detail
    texture = rng.normal(0.0, 0.02, size=(IMAGE_SIZE, IMAGE_SIZE))
    for c in range(3):
        body_c = np.clip(body[c] * shading + texture, 0.0, 1.0)
        img[c] = img[c] * (1.0 - mask) + body_c * mask
    np.clip(img, 0.0, 1.0, out=img)

    # Landmarks (x, y): dorsal = -normal side, ventral = +normal side.
    def on_spine(at: float) -> np.ndarray:
        p, _ = _interp_point(t, pts, tangents, at)
        return p

    def edge(at: float, side: int) -> np.ndarray:
        p, normal = _interp_point(t, pts, tangents, at)
        return p + side * normal * float(np.interp(at, t, half_w))

    seg_mid = [
        _T_JUNCTION + (_T_TAIL - _T_JUNCTION) * (i - 0.5) / _N_SEGMENTS
        for i in (1, 3, 6)
    ]
    landmarks = np.stack([
        on_spine(0.0),                    # 1 antennal scale tip
        on_spine(_T_TAIL),                # 2 tail, most anterior
        on_spine(1.0),                    # 3 tail, most posterior
        edge(_T_JUNCTION, -1),            # 4 junction, dorsal
        edge(_T_CARAPACE_MID, +1),        # 5 mid-carapace, ventral
        edge(_T_JUNCTION, +1),            # 6 junction, ventral
        edge(seg_mid[0], -1),             # 7 segment 1, dorsal
        edge(seg_mid[0], +1),             # 8 segment 1, ventral
        edge(seg_mid[1], -1),             # 9 segment 3, dorsal
        edge(seg_mid[1], +1),             # 10 segment 3, ventral
        edge(seg_mid[2], -1),             # 11 last segment, dorsal
        edge(seg_mid[2], +1),             # 12 last segment, ventral
    ])
    landmarks = np.round(landmarks, 2)
    if (landmarks < 0).any() or (landmarks > IMAGE_SIZE - 1).any():
        raise ContractError(f"specimen {specimen_id}: landmark left the frame")

    noise = float(np.clip(rng.normal(0.0, cfg.noise_sd), -0.45, 4.0))
    weight = cfg.allometric_a * length_mm ** cfg.allometric_b
    weight *= (1.0 + cfg.width_coeff * relw) * (1.0 + noise)

    return SpecimenRecord(
        id=specimen_id,
        image=img.astype(np.float32),
        landmarks=landmarks,
        weight_g=float(weight),
        mm_per_px=cfg.mm_per_px,
    )


def generate_dataset(cfg: GeneratorConfig, count: int) -> list[SpecimenRecord]:
    """``count`` records, each from its own (seed, id) substream."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    records = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, i)))
        records.append(generate_specimen(rng, cfg, specimen_id=i))
    return records


def make_heatmap_targets(landmarks, sigma: float = 1.5, grid: int = 56,
                         image_size: int = IMAGE_SIZE) -> np.ndarray:
    """One normalized Gaussian per landmark on a grid x grid heatmap.

    The Gaussian is evaluated at cell centers around the landmark mapped into
    grid coordinates, then normalized to sum exactly 1, so the channel argmax
    is the grid cell nearest the landmark.
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    lm = np.asarray(landmarks, dtype=np.float64)
    if (lm < 0).any() or (lm > image_size - 1).any():
        raise ContractError("landmark outside the image cannot be encoded")
    cells = np.arange(grid) + 0.5
    out = np.empty((len(lm), grid, grid), dtype=np.float64)
    for i, (x, y) in enumerate(lm):
        gx = x * grid / image_size
        gy = y * grid / image_size
        wx = np.exp(-np.square(cells - gx) / (2.0 * sigma * sigma))
        wy = np.exp(-np.square(cells - gy) / (2.0 * sigma * sigma))
        plane = np.outer(wy, wx)
        out[i] = plane / plane.sum()
    return out.astype(np.float32)


@dataclass
class AugmentationConfig:
    """Transform probabilities and limits of the training pipeline."""

    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_shift_scale: float = 0.5
    shift_limit: float = 0.0625  # fraction of the image extent
    scale_limit: float = 0.20
    p_rotate: float = 0.5
    rotate_limit_deg: float = 20.0
    p_blur: float = 0.3
    blur_limit: int = 1  # number of 3x3 box-blur passes
    p_rgb_shift: float = 0.3
    rgb_shift_limit: int = 25  # on the 0-255 scale

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_shift_scale", "p_rotate", "p_blur", "p_rgb_shift"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {v}")


@dataclass
class AppliedTransform:
    """One transform that fired, with its affine matrix when geometric."""

    name: str
    matrix: np.ndarray | None = None
    params: dict = field(default_factory=dict)


def _affine_chain(base: np.ndarray, extra: np.ndarray) -> np.ndarray:
    full = np.vstack([extra, [0.0, 0.0, 1.0]]) @ np.vstack([base, [0.0, 0.0, 1.0]])
    return full[:2]


def _warp_image(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Inverse-mapped bilinear affine warp; outside pixels fill with 0."""
    h, w = img.shape[1], img.shape[2]
    inv = np.linalg.inv(np.vstack([matrix, [0.0, 0.0, 1.0]]))[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
    sy = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros_like(img)
    valid = (sx >= -1) & (sx <= w) & (sy >= -1) & (sy <= h)
    x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    inside_x0 = (x0 >= 0) & (x0 <= w - 1)
    inside_x1 = (x0 + 1 >= 0) & (x0 + 1 <= w - 1)
    inside_y0 = (y0 >= 0) & (y0 <= h - 1)
    inside_y1 = (y0 + 1 >= 0) & (y0 + 1 <= h - 1)
    w00 = (1 - fx) * (1 - fy) * (inside_x0 & inside_y0)
    w10 = fx * (1 - fy) * (inside_x1 & inside_y0)
    w01 = (1 - fx) * fy * (inside_x0 & inside_y1)
    w11 = fx * fy * (inside_x1 & inside_y1)
    for c in range(img.shape[0]):
        plane = img[c]
        acc = (plane[y0c, x0c] * w00 + plane[y0c, x1c] * w10
               + plane[y1c, x0c] * w01 + plane[y1c, x1c] * w11)
        out[c] = np.where(valid, acc, 0.0)
    return out.astype(img.dtype)


def _box_blur(img: np.ndarray, passes: int) -> np.ndarray:
    out = img.astype(np.float64)
    for _ in range(passes):
        padded = np.pad(out, ((0, 0), (1, 1), (1, 1)), mode="edge")
        acc = np.zeros_like(out)
        for dy in range(3):
            for dx in range(3):
                acc += padded[:, dy:dy + out.shape[1], dx:dx + out.shape[2]]
        out = acc / 9.0
    return out.astype(img.dtype)


def augment(rec: SpecimenRecord, cfg: AugmentationConfig,
            rng: np.random.Generator) -> tuple[SpecimenRecord, list[AppliedTransform]]:
    """Sample and apply the transform pipeline to image and landmarks together.

    Returns the transformed record plus the list of transforms that fired (in
    application order), each carrying its affine matrix so the landmark
    mapping can be replayed and checked.
    """
    h = w = IMAGE_SIZE
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    matrix = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    applied: list[AppliedTransform] = []

    if rng.random() < cfg.p_hflip:
        m = np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0]])
        matrix = _affine_chain(matrix, m)
        applied.append(AppliedTransform("hflip", m))
    if rng.random() < cfg.p_vflip:
        m = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, h - 1.0]])
        matrix = _affine_chain(matrix, m)
        applied.append(AppliedTransform("vflip", m))
    if rng.random() < cfg.p_shift_scale:
        dx = rng.uniform(-cfg.shift_limit, cfg.shift_limit) * w
        dy = rng.uniform(-cfg.shift_limit, cfg.shift_limit) * h
        s = 1.0 + rng.uniform(-cfg.scale_limit, cfg.scale_limit)
        m = np.array([[s, 0.0, cx - s * cx + dx], [0.0, s, cy - s * cy + dy]])
        matrix = _affine_chain(matrix, m)
        applied.append(AppliedTransform("shift_scale", m, {"dx": dx, "dy": dy, "scale": s}))
    if rng.random() < cfg.p_rotate:
        deg = rng.uniform(-cfg.rotate_limit_deg, cfg.rotate_limit_deg)
        rad = np.deg2rad(deg)
        c, s = np.cos(rad), np.sin(rad)
        m = np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]])
        matrix = _affine_chain(matrix, m)
        applied.append(AppliedTransform("rotate", m, {"degrees": deg}))

    image = rec.image
    landmarks = rec.landmarks
    geometric = [a for a in applied if a.matrix is not None]
    if geometric:
        image = _warp_image(image, matrix)
        ones = np.ones((len(landmarks), 1))
        landmarks = np.hstack([landmarks, ones]) @ matrix.T
        clipped = np.clip(landmarks, 0.0, w - 1.0)
        if not np.array_equal(clipped, landmarks):
            logger.warning("augment: %d landmark(s) clamped to the border",
                           int((clipped != landmarks).any(axis=1).sum()))
            for a in geometric:
                a.params["clamped"] = True
        landmarks = clipped

    if rng.random() < cfg.p_blur:
        image = _box_blur(image, cfg.blur_limit)
        applied.append(AppliedTransform("blur", None, {"passes": cfg.blur_limit}))
    if rng.random() < cfg.p_rgb_shift:
        shift = rng.uniform(-cfg.rgb_shift_limit, cfg.rgb_shift_limit, size=3) / 255.0
        image = np.clip(image + shift[:, None, None].astype(image.dtype), 0.0, 1.0)
        applied.append(AppliedTransform("rgb_shift", None, {"shift": shift.tolist()}))

    out = replace(rec, image=image.astype(np.float32), landmarks=landmarks)
    return out, applied


def split(dataset, fractions: tuple[float, float, float] = (0.4, 0.2, 0.4),
          seed: int = 0):
    """Seeded shuffle then contiguous partition into (train, val, test).

    Sizes follow the largest-remainder rule, so fractions are met exactly up
    to integer rounding and the parts are disjoint and exhaustive.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    n = len(dataset)
    if n < 3:
        raise ConfigError(f"need at least 3 records to split, got {n}")
    raw = [f * n for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    remainders = [r - s for r, s in zip(raw, sizes)]
    for _ in range(n - sum(sizes)):
        k = int(np.argmax(remainders))
        sizes[k] += 1
        remainders[k] = -1.0
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [dataset[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


def save_dataset(records, directory) -> Path:
    """Write PNG images plus a line-delimited JSON index.

    Landmark coordinates are written as decimal text with two fractional
    digits (their generation-time resolution); weights round-trip exactly via
    shortest-repr decimal text.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        rel = f"images/{rec.id:06d}.png"
        arr = np.clip(np.round(rec.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0)).save(directory / rel)
        lines.append(json.dumps({
            "id": rec.id,
            "image": rel,
            "landmarks": [[round(float(x), 2), round(float(y), 2)]
                          for x, y in rec.landmarks],
            "weight_g": rec.weight_g,
            "mm_per_px": rec.mm_per_px,
        }))
    (directory / "index.jsonl").write_text("\n".join(lines) + "\n")
    return directory


def load_dataset(directory) -> list[SpecimenRecord]:
    """Read a dataset written by :func:`save_dataset`."""
    directory = Path(directory)
    index = directory / "index.jsonl"
    if not index.is_file():
        raise DatasetError(f"no index file at {index}")
    records = []
    for lineno, line in enumerate(index.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            rec_id = int(row["id"])
            rel = row["image"]
            landmarks = np.array(row["landmarks"], dtype=np.float64)
            weight = float(row["weight_g"])
            mm_per_px = float(row["mm_per_px"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{index}:{lineno}: malformed record ({exc})") from exc
        if landmarks.shape != (12, 2):
            raise DatasetError(f"{index}:{lineno}: expected 12 landmark pairs")
        img_path = directory / rel
        if not img_path.is_file():
            raise DatasetError(f"{index}:{lineno}: missing image file {img_path}")
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        records.append(SpecimenRecord(
            id=rec_id,
            image=arr.transpose(2, 0, 1),
            landmarks=landmarks,
            weight_g=weight,
            mm_per_px=mm_per_px,
        ))
    return records
