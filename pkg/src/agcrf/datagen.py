"""Synthetic contour scenes with exact ground truth, plus PGM/PNG image I/O.

Scenes are stacks of filled shapes (polygons and ellipses) on a flat
background.  The edge mask is computed from the clean shape-ownership
labels before any blur or noise touches the image, so ground truth is exact
by construction: a pixel is an edge pixel when it owns a strictly higher
label than some 4-neighbor, which yields 1-pixel-wide boundaries even where
shapes overlap.

Images travel as binary PGM (P5, maxval 255) for bit-exact round trips;
PNG export exists for eyeballing only.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import Tensor


class PgmError(ValueError):
    """Malformed PGM data; the message carries the byte offset."""


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeSpec:
    """One filled shape: 'polygon' with (x, y) vertices or 'ellipse' with
    (cx, cy, rx, ry).  Intensity is the fill value in [0, 1]."""

    kind: str
    geometry: tuple
    intensity: float

    def __post_init__(self):
        if self.kind not in ("polygon", "ellipse"):
            raise ValueError(f"unknown shape kind '{self.kind}'")
        if not (0.0 <= self.intensity <= 1.0):
            raise ValueError(f"intensity {self.intensity} outside [0, 1]")
        if self.kind == "polygon":
            if len(self.geometry) < 3:
                raise ValueError("polygon needs at least 3 vertices")
            pts = np.asarray(self.geometry, dtype=np.float64)
            x, y = pts[:, 0], pts[:, 1]
            area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
            if area <= 0.0:
                raise ValueError("degenerate polygon: zero area")
        else:
            cx, cy, rx, ry = self.geometry
            if rx <= 0 or ry <= 0:
                raise ValueError("degenerate ellipse: non-positive radius")

    def bounds(self) -> tuple[float, float, float, float]:
        """(min_x, min_y, max_x, max_y)"""
        if self.kind == "polygon":
            pts = np.asarray(self.geometry, dtype=np.float64)
            return (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())
        cx, cy, rx, ry = self.geometry
        return (cx - rx, cy - ry, cx + rx, cy + ry)


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    shapes: tuple[ShapeSpec, ...] = ()
    background: float = 0.1
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("canvas must be at least 1x1")
        if not (0.0 <= self.background <= 1.0):
            raise ValueError("background intensity outside [0, 1]")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise and blur magnitudes must be non-negative")
        for i, shape in enumerate(self.shapes):
            min_x, min_y, max_x, max_y = shape.bounds()
            if min_x < 0 or min_y < 0 or max_x > self.width - 1 or max_y > self.height - 1:
                raise ValueError(f"shape {i} extends outside the canvas")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        raw = json.loads(text)
        shapes = tuple(
            ShapeSpec(s["kind"],
                      tuple(tuple(p) for p in s["geometry"]) if s["kind"] == "polygon"
                      else tuple(s["geometry"]),
                      s["intensity"])
            for s in raw.pop("shapes", []))
        return cls(shapes=shapes, **raw)


@dataclass
class Sample:
    """A rendered scene: image tensor plus its exact binary edge mask."""

    image: Tensor
    edges: np.ndarray


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _inside_mask(shape: ShapeSpec, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    if shape.kind == "ellipse":
        cx, cy, rx, ry = shape.geometry
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    # even-odd rule, one horizontal-ray crossing toggle per edge
    pts = np.asarray(shape.geometry, dtype=np.float64)
    inside = np.zeros((height, width), dtype=bool)
    n = len(pts)
    for a in range(n):
        x1, y1 = pts[a]
        x2, y2 = pts[(a + 1) % n]
        if y1 == y2:
            continue
        spans = (yy >= min(y1, y2)) & (yy < max(y1, y2))
        x_cross = x1 + (yy - y1) * (x2 - x1) / (y2 - y1)
        inside ^= spans & (xx < x_cross)
    return inside


def rasterize_labels(spec: SceneSpec) -> np.ndarray:
    """Ownership label per pixel: 0 = background, i+1 = shapes[i], later wins."""
    labels = np.zeros((spec.height, spec.width), dtype=np.int32)
    for i, shape in enumerate(spec.shapes):
        labels[_inside_mask(shape, spec.height, spec.width)] = i + 1
    return labels


def edges_from_labels(labels: np.ndarray) -> np.ndarray:
    """A pixel is an edge pixel iff its label exceeds some 4-neighbor's.

    Claiming the boundary for the higher label keeps every contour exactly
    one pixel wide, including where shapes overlap or nest.
    """
    edges = np.zeros(labels.shape, dtype=np.uint8)
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        neighbor = np.roll(labels, shift, axis=axis)
        valid = np.ones(labels.shape, dtype=bool)
        index = [slice(None), slice(None)]
        index[axis] = 0 if shift == 1 else -1
        valid[tuple(index)] = False
        edges |= (valid & (labels > neighbor)).astype(np.uint8)
    return edges


def generate(spec: SceneSpec) -> Sample:
    """Render a scene: exact edges from clean labels, then blur and noise."""
    labels = rasterize_labels(spec)
    edges = edges_from_labels(labels)
    intensities = np.array([spec.background]
                           + [s.intensity for s in spec.shapes], dtype=np.float64)
    image = intensities[labels]
    if spec.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, spec.blur_sigma)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Sample(Tensor(image[np.newaxis]), edges)


# ---------------------------------------------------------------------------
# random scenes and datasets
# ---------------------------------------------------------------------------

def random_scene(rng: np.random.Generator, height: int = 64, width: int = 64,
                 min_shapes: int = 2, max_shapes: int = 5,
                 noise_sigma: float = 0.03, blur_sigma: float = 0.8) -> SceneSpec:
    """Draw a scene of random ellipses and convex quadrilaterals.

    Fill intensities alternate around the background level so neighboring
    shapes keep usable contrast after blur.
    """
    n_shapes = int(rng.integers(min_shapes, max_shapes + 1))
    shapes = []
    for _ in range(n_shapes):
        intensity = float(rng.uniform(0.35, 1.0))
        if rng.random() < 0.5:
            rx = float(rng.uniform(4, width / 4))
            ry = float(rng.uniform(4, height / 4))
            cx = float(rng.uniform(rx, width - 1 - rx))
            cy = float(rng.uniform(ry, height - 1 - ry))
            shapes.append(ShapeSpec("ellipse", (cx, cy, rx, ry), intensity))
        else:
            cx = rng.uniform(width * 0.2, width * 0.8)
            cy = rng.uniform(height * 0.2, height * 0.8)
            radii = rng.uniform(min(height, width) * 0.1, min(height, width) * 0.3, size=4)
            angles = np.sort(rng.uniform(0, 2 * np.pi, size=4))
            xs = np.clip(cx + radii * np.cos(angles), 0, width - 1)
            ys = np.clip(cy + radii * np.sin(angles), 0, height - 1)
            pts = tuple((float(x), float(y)) for x, y in zip(xs, ys))
            try:
                shapes.append(ShapeSpec("polygon", pts, intensity))
            except ValueError:
                continue  # rare collinear draw, drop it
    return SceneSpec(height, width, tuple(shapes), background=0.15,
                     noise_sigma=noise_sigma, blur_sigma=blur_sigma,
                     seed=int(rng.integers(0, 2 ** 31)))


def generate_dataset(out_dir: str, count: int, height: int = 64, width: int = 64,
                     seed: int = 0, noise_sigma: float = 0.03,
                     blur_sigma: float = 0.8) -> str:
    """Write ``count`` image/mask PGM pairs plus a manifest; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(count):
        sample = generate(random_scene(rng, height, width,
                                       noise_sigma=noise_sigma, blur_sigma=blur_sigma))
        img_name = f"img_{i:04d}.pgm"
        mask_name = f"gt_{i:04d}.pgm"
        save_pgm(os.path.join(out_dir, img_name), sample.image.data[0])
        save_pgm(os.path.join(out_dir, mask_name), sample.edges * 255)
        # names are manifest-relative so the dataset directory can move
        lines.append(f"{img_name}\t{mask_name}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def load_manifest(path: str) -> list[tuple[str, str]]:
    """Parse image<TAB>mask lines, resolving relative paths from the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'image<TAB>mask'")
            pairs.append(tuple(p if os.path.isabs(p) else os.path.join(base, p)
                               for p in parts))
    return pairs


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 by round-half-even; uint8 passes through."""
    arr = np.asarray(values)
    if arr.dtype == np.uint8:
        return arr
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_pgm(path: str, values: np.ndarray) -> None:
    """Write a binary PGM, header exactly 'P5\\n{W} {H}\\n255\\n'."""
    arr = quantize(values)
    if arr.ndim != 2:
        raise ValueError(f"PGM wants a 2-d array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def load_pgm(path: str) -> np.ndarray:
    """Read a binary PGM written by save_pgm (or compatible)."""
    with open(path, "rb") as fh:
        data = fh.read()

    pos = 0

    def fail(msg: str):
        raise PgmError(f"{path}: {msg} at byte offset {pos}")

    def token() -> bytes:
        nonlocal pos
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            fail("unexpected end of file")
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        return data[start:pos]

    if token() != b"P5":
        pos = 0
        fail("not a binary PGM (missing P5 magic)")
    dims = []
    for _ in range(3):
        tok = token()
        if not tok.isdigit():
            fail(f"expected an integer, got {tok[:16]!r}")
        dims.append(int(tok))
    w, h, maxval = dims
    if w < 1 or h < 1:
        fail(f"bad dimensions {w}x{h}")
    if maxval != 255:
        fail(f"unsupported maxval {maxval} (only 255)")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        fail("missing whitespace after maxval")
    pos += 1
    expected = w * h
    if len(data) - pos < expected:
        fail(f"pixel data truncated: need {expected} bytes, have {len(data) - pos}")
    if len(data) - pos > expected:
        fail(f"trailing bytes after pixel data: expected {expected}")
    return np.frombuffer(data, dtype=np.uint8, count=expected, offset=pos).reshape(h, w)


def save_png_gray(path: str, values: np.ndarray) -> None:
    """8-bit grayscale PNG for human viewing; PGM remains the exact format."""
    Image.fromarray(quantize(values), mode="L").save(path, format="PNG")


def load_image_pair(img_path: str, mask_path: str) -> tuple[np.ndarray, np.ndarray]:
    """Load a training pair: image as float [0,1], mask as binary {0,1}."""
    image = load_pgm(img_path).astype(np.float64) / 255.0
    mask = (load_pgm(mask_path) > 127).astype(np.float64)
    return image[np.newaxis], mask
