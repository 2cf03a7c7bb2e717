"""Multi-granularity facial patch extraction.

A frame plus 51 landmark points become 15 normalized 64x64x3 patches:
10 local regions cropped at 32 px, 4 main parts at 64 px, and 1 global
face at 160 px, all resized to 64 px and mapped to [-0.5, 0.5]. Which
landmarks anchor which patch is configuration data (see
``configs/landmarks51.json``), not code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DataValidationError

PATCH_COUNT = 15
LOCAL_COUNT = 10
PART_COUNT = 4
UNIFIED_SIZE = 64

GRANULARITIES = ("local", "part", "global")


class LandmarkScheme:
    """51-point landmark layout plus the 15 anchor definitions."""

    def __init__(self, config: dict):
        self.name = config["scheme"]
        self.point_count = int(config["point_count"])
        self.groups = {k: list(v) for k, v in config["groups"].items()}
        self.parts = [(name, list(idx)) for name, idx in config["parts"]]
        self.locals = [(name, list(idx)) for name, idx in config["locals"]]
        self.sizes = {k: int(v) for k, v in config["sizes"].items()}
        self.specific_sampling = config["specific_sampling"]
        if len(self.locals) != LOCAL_COUNT or len(self.parts) != PART_COUNT:
            raise DataValidationError(
                f"scheme must define {LOCAL_COUNT} locals and {PART_COUNT} parts")

    @classmethod
    def from_file(cls, path) -> "LandmarkScheme":
        with open(path) as f:
            return cls(json.load(f))

    @property
    def patch_names(self) -> list[str]:
        names = [f"local/{n}" for n, _ in self.locals]
        names += [f"part/{n}" for n, _ in self.parts]
        names.append("global/face")
        return names

    @property
    def crop_sizes(self) -> np.ndarray:
        """Crop side per canonical patch index (10 local, 4 part, 1 global)."""
        return np.array([self.sizes["local"]] * LOCAL_COUNT
                        + [self.sizes["part"]] * PART_COUNT
                        + [self.sizes["global"]], dtype=np.int64)


_default_scheme: LandmarkScheme | None = None


def default_scheme() -> LandmarkScheme:
    global _default_scheme
    if _default_scheme is None:
        text = resources.files("lmdf.configs").joinpath("landmarks51.json").read_text()
        _default_scheme = LandmarkScheme(json.loads(text))
    return _default_scheme


@dataclass
class FacialShape:
    """51 landmark points (x, y) in frame pixel coordinates.

    The all-zero shape is the reserved no-face sentinel.
    """

    points: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (51, 2):
            raise DataValidationError(
                f"facial shape needs 51 (x, y) points, got array of shape {self.points.shape}")

    @property
    def is_sentinel(self) -> bool:
        return not np.any(self.points)

    @classmethod
    def sentinel(cls, frame_index: int = 0) -> "FacialShape":
        return cls(np.zeros((51, 2)), frame_index=frame_index)


@dataclass(frozen=True)
class PatchSpec:
    """One patch position: granularity, anchor rule, and sizes."""

    granularity: str
    anchor_rule: str
    crop_size: int
    unified_size: int = UNIFIED_SIZE

    def __post_init__(self):
        expected = {"local": 32, "part": 64, "global": 160}
        if self.granularity not in expected:
            raise DataValidationError(f"unknown granularity {self.granularity!r}")
        if self.crop_size != expected[self.granularity]:
            raise DataValidationError(
                f"{self.granularity} patches crop at {expected[self.granularity]} px, "
                f"got {self.crop_size}")
        if self.unified_size != UNIFIED_SIZE:
            raise DataValidationError(f"unified size is fixed at {UNIFIED_SIZE}")


def patch_specs(scheme: LandmarkScheme | None = None) -> list[PatchSpec]:
    """The 15 specs in canonical order (10 local, 4 part, 1 global)."""
    scheme = scheme or default_scheme()
    specs = [PatchSpec("local", n, scheme.sizes["local"]) for n, _ in scheme.locals]
    specs += [PatchSpec("part", n, scheme.sizes["part"]) for n, _ in scheme.parts]
    specs.append(PatchSpec("global", "face", scheme.sizes["global"]))
    return specs


@dataclass
class PatchSet:
    """The 15 normalized patches for one frame, canonical order."""

    patches: np.ndarray  # (15, 64, 64, 3) float32 in [-0.5, 0.5]
    frame_index: int = 0
    names: list[str] = field(default_factory=lambda: default_scheme().patch_names)

    def __post_init__(self):
        if self.patches.shape != (PATCH_COUNT, UNIFIED_SIZE, UNIFIED_SIZE, 3):
            raise DataValidationError(
                f"patch set must be {PATCH_COUNT} x {UNIFIED_SIZE} x {UNIFIED_SIZE} x 3, "
                f"got {self.patches.shape}")

    def __len__(self) -> int:
        return PATCH_COUNT

    def __getitem__(self, k: int) -> np.ndarray:
        return self.patches[k]


def anchor_points(shape: FacialShape, scheme: LandmarkScheme | None = None) -> np.ndarray:
    """The 15 patch centers (x, y) in canonical order.

    Locals are single landmarks (or small subsets), parts are landmark
    subset centroids, the global anchor is the centroid of all 51 points.
    A sentinel shape yields 15 (0, 0) anchors.
    """
    scheme = scheme or default_scheme()
    pts = shape.points
    centers = np.empty((PATCH_COUNT, 2), dtype=np.float64)
    for i, (_, idx) in enumerate(scheme.locals):
        centers[i] = pts[idx].mean(axis=0)
    for i, (_, idx) in enumerate(scheme.parts):
        centers[LOCAL_COUNT + i] = pts[idx].mean(axis=0)
    centers[-1] = pts.mean(axis=0)
    return centers


def _bilinear_patch(frame: np.ndarray, center, crop_size: float, unified_size: int) -> np.ndarray:
    """Crop a square of side crop_size centered at (cx, cy), resize to
    unified_size with bilinear interpolation, zero-filling outside the frame."""
    h, w = frame.shape[:2]
    cx, cy = float(center[0]), float(center[1])
    scale = crop_size / unified_size
    grid = np.arange(unified_size, dtype=np.float64)
    xs = cx - crop_size / 2.0 + (grid + 0.5) * scale - 0.5
    ys = cy - crop_size / 2.0 + (grid + 0.5) * scale - 0.5

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    wx = (xs - x0)[None, :, None]
    wy = (ys - y0)[:, None, None]

    def corner(yi, xi):
        iy = (yi >= 0) & (yi < h)
        ix = (xi >= 0) & (xi < w)
        v = frame[np.clip(yi, 0, h - 1)[:, None], np.clip(xi, 0, w - 1)[None, :], :]
        return v * (iy[:, None] & ix[None, :])[:, :, None]

    out = (corner(y0, x0) * (1 - wy) * (1 - wx)
           + corner(y0, x0 + 1) * (1 - wy) * wx
           + corner(y0 + 1, x0) * wy * (1 - wx)
           + corner(y0 + 1, x0 + 1) * wy * wx)
    return out


def crop_resize(frame: np.ndarray, center, crop_size: int, unified_size: int) -> np.ndarray:
    """Axis-aligned square crop + bilinear resize, raw value range preserved.

    frame must be (H, W, C); out-of-frame area is zero-filled.
    """
    if crop_size <= 0 or unified_size <= 0:
        raise DataValidationError(
            f"crop_size and unified_size must be positive, got {crop_size}, {unified_size}")
    if frame.ndim != 3 or frame.shape[0] < 1 or frame.shape[1] < 1:
        raise DataValidationError(f"frame must be non-empty H x W x C, got shape {frame.shape}")
    return _bilinear_patch(frame.astype(np.float64, copy=False), center,
                           float(crop_size), int(unified_size)).astype(np.float32)


def _prepare_frame(frame: np.ndarray) -> np.ndarray:
    """Validate and convert a frame to float H x W x 3 in [0, 255]."""
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    if frame.ndim != 3 or frame.shape[2] not in (1, 3):
        raise DataValidationError(
            f"frame must be 1- or 3-channel H x W (x C), got shape {frame.shape}")
    f = frame.astype(np.float64, copy=False)
    if f.size and (f.min() < 0 or f.max() > 255):
        raise DataValidationError("frame values must lie in [0, 255]")
    if f.shape[2] == 1:
        f = np.repeat(f, 3, axis=2)
    return f


def _assemble(frame3: np.ndarray, centers: np.ndarray,
              crop_sizes: np.ndarray, frame_index: int,
              scheme: LandmarkScheme) -> PatchSet:
    out = np.empty((PATCH_COUNT, UNIFIED_SIZE, UNIFIED_SIZE, 3), dtype=np.float32)
    for k in range(PATCH_COUNT):
        raw = _bilinear_patch(frame3, centers[k], float(crop_sizes[k]), UNIFIED_SIZE)
        out[k] = (raw / 255.0 - 0.5).astype(np.float32)
    return PatchSet(out, frame_index=frame_index, names=scheme.patch_names)


def build_patch_set(frame: np.ndarray, shape: FacialShape,
                    scheme: LandmarkScheme | None = None) -> PatchSet:
    """The full frame -> 15-patch mapping with normalization.

    Grayscale frames are replicated to 3 channels before cropping; each
    value maps to v/255 - 0.5. A sentinel shape yields 15 all-(-0.5)
    patches (the normalized black image) so sequences keep their length.
    """
    scheme = scheme or default_scheme()
    frame3 = _prepare_frame(frame)
    if shape.is_sentinel:
        patches = np.full((PATCH_COUNT, UNIFIED_SIZE, UNIFIED_SIZE, 3), -0.5, dtype=np.float32)
        return PatchSet(patches, frame_index=shape.frame_index, names=scheme.patch_names)
    centers = anchor_points(shape, scheme)
    return _assemble(frame3, centers, scheme.crop_sizes, shape.frame_index, scheme)


def empty_patch_set(frame_index: int = 0, scheme: LandmarkScheme | None = None) -> PatchSet:
    """The defined no-face patch set: 15 all-(-0.5) patches."""
    scheme = scheme or default_scheme()
    patches = np.full((PATCH_COUNT, UNIFIED_SIZE, UNIFIED_SIZE, 3), -0.5, dtype=np.float32)
    return PatchSet(patches, frame_index=frame_index, names=scheme.patch_names)


def perturb_landmarks(shape: FacialShape, sigma: float, seed=None) -> FacialShape:
    """Add independent N(0, sigma^2) noise to every coordinate.

    Seedable and reproducible; sentinel shapes pass through unchanged.
    """
    if sigma < 0:
        raise DataValidationError(f"sigma must be >= 0, got {sigma}")
    if shape.is_sentinel or sigma == 0:
        return FacialShape(shape.points.copy(), frame_index=shape.frame_index)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=(51, 2))
    return FacialShape(shape.points + noise, frame_index=shape.frame_index)


def sample_unaligned(frame: np.ndarray, box, method: str, seed=None,
                     scheme: LandmarkScheme | None = None,
                     frame_index: int = 0) -> PatchSet:
    """Alignment-free baselines: 15 patches sampled inside a face box.

    box is (x, y, w, h). method "uniform" draws the 15 centers uniformly
    in the box; "specific" uses a fixed grid of box-relative positions.
    Patch sizes match the aligned pipeline (32/64/160 -> 64).
    """
    scheme = scheme or default_scheme()
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise DataValidationError(f"degenerate face box {box}")
    frame3 = _prepare_frame(frame)
    if method == "uniform":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        centers = np.column_stack([
            rng.uniform(x, x + w, size=PATCH_COUNT),
            rng.uniform(y, y + h, size=PATCH_COUNT),
        ])
    elif method == "specific":
        rel = (scheme.specific_sampling["locals"]
               + scheme.specific_sampling["parts"]
               + [scheme.specific_sampling["global"]])
        rel = np.asarray(rel, dtype=np.float64)
        centers = np.column_stack([x + rel[:, 0] * w, y + rel[:, 1] * h])
    else:
        raise DataValidationError(f"unknown sampling method {method!r}")
    return _assemble(frame3, centers, scheme.crop_sizes, frame_index, scheme)
