"""Preprocessing: background fill, color transforms, 4-channel stacking, resize.

Images are numpy arrays throughout: 8-bit RGB is uint8 [H, W, 3], the network
input is float32 [H, W, 4] with channels (H, S, V, Gray) each in [0, 1].
"""

from __future__ import annotations

import os
import tempfile

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, InvalidSpecError, ShapeMismatchError


def _require_rgb8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ShapeMismatchError(f"expected uint8 [H, W, 3], got {image.dtype} {image.shape}")
    return image


def flood_fill_background(image: np.ndarray, threshold: int = 12) -> np.ndarray:
    """Boolean mask (True = background) grown from the four corners.

    A pixel joins when every channel differs from the already-labeled
    neighbor by at most `threshold`; expansion repeats until no pixel can
    be labeled. Connectivity is 4-neighbor.
    """
    image = _require_rgb8(image)
    if threshold < 0:
        raise InvalidSpecError(f"threshold must be non-negative, got {threshold}")
    h, w = image.shape[:2]
    wide = image.astype(np.int16)
    vgap = np.abs(wide[1:] - wide[:-1]).max(axis=2)
    hgap = np.abs(wide[:, 1:] - wide[:, :-1]).max(axis=2)
    v_ok = vgap <= threshold
    h_ok = hgap <= threshold

    mask = np.zeros((h, w), dtype=bool)
    seed_y = np.array([0, 0, h - 1, h - 1])
    seed_x = np.array([0, w - 1, 0, w - 1])
    mask[seed_y, seed_x] = True
    ys, xs = np.nonzero(mask)
    while ys.size:
        next_y = []
        next_x = []
        for dy, dx, ok in ((-1, 0, v_ok), (1, 0, v_ok), (0, -1, h_ok), (0, 1, h_ok)):
            ny = ys + dy
            nx = xs + dx
            inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            ny, nx = ny[inside], nx[inside]
            gy = np.minimum(ny, ny - dy) if dy else ny
            gx = np.minimum(nx, nx - dx) if dx else nx
            allowed = ok[gy, gx] & ~mask[ny, nx]
            ny, nx = ny[allowed], nx[allowed]
            mask[ny, nx] = True
            next_y.append(ny)
            next_x.append(nx)
        ys = np.concatenate(next_y)
        xs = np.concatenate(next_x)
    return mask


def apply_background(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """White out masked pixels; foreground is copied untouched."""
    image = _require_rgb8(image)
    mask = np.asarray(mask)
    if mask.shape != image.shape[:2] or mask.dtype != bool:
        raise ShapeMismatchError(
            f"mask {mask.dtype} {mask.shape} does not fit image {image.shape[:2]}"
        )
    out = image.copy()
    out[mask] = 255
    return out


def rgb_to_hsv(r, g, b):
    """Hexcone HSV from 8-bit channels, each component scaled to [0, 1].

    Accepts scalars or same-shaped arrays; hue is 0 wherever chroma is 0.
    """
    r = np.asarray(r, dtype=np.float64) / 255.0
    g = np.asarray(g, dtype=np.float64) / 255.0
    b = np.asarray(b, dtype=np.float64) / 255.0
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    chroma = maxc - minc
    safe = np.where(chroma == 0.0, 1.0, chroma)
    sector = np.select(
        [chroma == 0.0, maxc == r, maxc == g],
        [np.zeros_like(maxc), (g - b) / safe, 2.0 + (b - r) / safe],
        default=4.0 + (r - g) / safe,
    )
    h = np.where(chroma == 0.0, 0.0, (sector / 6.0) % 1.0)
    s = np.where(maxc > 0.0, chroma / np.where(maxc == 0.0, 1.0, maxc), 0.0)
    if h.ndim == 0:
        return float(h), float(s), float(maxc)
    return h, s, maxc


def hsv_to_rgb(h, s, v):
    """Inverse hexcone transform; components in [0, 1] in and out."""
    h = np.asarray(h, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.select([sector == 0, sector == 1, sector == 2, sector == 3, sector == 4], [v, q, p, p, t], default=v)
    g = np.select([sector == 0, sector == 1, sector == 2, sector == 3, sector == 4], [t, v, v, q, p], default=p)
    b = np.select([sector == 0, sector == 1, sector == 2, sector == 3, sector == 4], [p, p, t, v, v], default=q)
    if r.ndim == 0:
        return float(r), float(g), float(b)
    return r, g, b


def rgb_to_gray(r, g, b):
    """BT.601 luma from 8-bit channels, scaled to [0, 1]."""
    r = np.asarray(r, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    gray = (299.0 * r + 587.0 * g + 114.0 * b) / 255000.0
    return float(gray) if gray.ndim == 0 else gray


def make_4channel(image: np.ndarray) -> np.ndarray:
    """Stack (H, S, V, Gray) planes from an 8-bit RGB image."""
    image = _require_rgb8(image)
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    h, s, v = rgb_to_hsv(r, g, b)
    gray = rgb_to_gray(r, g, b)
    stacked = np.stack([h, s, v, gray], axis=-1).astype(np.float32)
    return np.clip(stacked, 0.0, 1.0)


def _sample_coords(src: int, dst: int) -> np.ndarray:
    if dst == 1:
        return np.full(1, (src - 1) / 2.0)
    return np.arange(dst, dtype=np.float64) * ((src - 1) / (dst - 1))


def resize_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize with corners aligned to pixel centers."""
    image = _require_rgb8(image)
    if width < 1 or height < 1:
        raise InvalidSpecError(f"target size {width}x{height} must be at least 1x1")
    src_h, src_w = image.shape[:2]
    if (src_w, src_h) == (width, height):
        return image.copy()
    ys = _sample_coords(src_h, height)
    xs = _sample_coords(src_w, width)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    plane = image.astype(np.float64)
    top = plane[np.ix_(y0, x0)] + (plane[np.ix_(y0, x1)] - plane[np.ix_(y0, x0)]) * fx
    bottom = plane[np.ix_(y1, x0)] + (plane[np.ix_(y1, x1)] - plane[np.ix_(y1, x0)]) * fx
    blended = top + (bottom - top) * fy
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def load_rgb8(path: str) -> np.ndarray:
    """Decode a raster file to uint8 RGB, discarding any alpha."""
    try:
        with Image.open(path) as decoded:
            return np.asarray(decoded.convert("RGB"))
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc


def save_rgb8(path: str, image: np.ndarray) -> None:
    """Encode to PNG, written atomically."""
    image = _require_rgb8(image)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".png")
    try:
        with os.fdopen(fd, "wb") as handle:
            Image.fromarray(image, mode="RGB").save(handle, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
