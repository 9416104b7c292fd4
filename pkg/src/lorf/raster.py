"""Rasters (image/depth/feature/confidence/flow planes), bilinear sampling with
analytic gradients, pyramids, finite-difference image gradients, PNG/PFM I/O."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import OutOfBounds, TooManyLevels

KINDS = ("color", "gray", "depth", "feature", "confidence", "flow")


@dataclass
class Raster:
    """Immutable-by-convention (H, W, C) float32 plane with a semantics tag."""

    data: np.ndarray
    kind: str = "color"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown raster kind {self.kind!r}")
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3:
            raise ValueError("raster data must be HxW or HxWxC")
        if not np.all(np.isfinite(d)):
            raise ValueError("raster contains non-finite values")
        self.data = d

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def to_gray(self) -> "Raster":
        if self.channels == 1:
            return Raster(self.data, "gray")
        return Raster(self.data.mean(axis=2), "gray")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_bilinear_many(raster: Raster, uv):
    """Bilinear sample at continuous pixel coords, vectorized.

    Returns (values (N, C), grads (N, 2, C), valid (N,)); out-of-bounds samples
    get zero value/grad and valid=False. Computation in float64.
    """
    data = raster.data.astype(np.float64)
    h, w, c = data.shape
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    u, v = uv[:, 0], uv[:, 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    u0 = np.clip(np.floor(uc).astype(int), 0, w - 2) if w > 1 else np.zeros(len(u), int)
    v0 = np.clip(np.floor(vc).astype(int), 0, h - 2) if h > 1 else np.zeros(len(v), int)
    fu = (uc - u0)[:, None]
    fv = (vc - v0)[:, None]
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    p00 = data[v0, u0]
    p01 = data[v0, u1]
    p10 = data[v1, u0]
    p11 = data[v1, u1]
    top = p00 * (1 - fu) + p01 * fu
    bot = p10 * (1 - fu) + p11 * fu
    val = top * (1 - fv) + bot * fv
    # analytic spatial gradient of the interpolant
    du = (p01 - p00) * (1 - fv) + (p11 - p10) * fv
    dv = bot - top
    grad = np.stack([du, dv], axis=1)  # (N, 2, C)
    val[~valid] = 0.0
    grad[~valid] = 0.0
    return val, grad, valid


def sample_bilinear(raster: Raster, pixel):
    """Scalar bilinear sample; raises OutOfBounds outside [0,w-1]x[0,h-1]."""
    val, grad, valid = sample_bilinear_many(raster, [pixel])
    if not valid[0]:
        raise OutOfBounds(f"pixel {pixel} outside raster")
    return val[0], grad[0]


# ---------------------------------------------------------------------------
# pyramids
# ---------------------------------------------------------------------------

@dataclass
class Pyramid:
    levels: list  # of Raster, level 0 finest

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def _downsample2(data):
    h, w, c = data.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    # pad odd edges by replication so every coarse texel averages a full 2x2 box
    if h % 2 or w % 2:
        data = np.pad(data, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge")
    return 0.25 * (data[0::2, 0::2] + data[0::2, 1::2]
                   + data[1::2, 0::2] + data[1::2, 1::2])


def build_pyramid(r: Raster, levels: int) -> Pyramid:
    """2x2 box-filtered, stride-2 pyramid; level 0 is the input."""
    if levels < 1:
        raise TooManyLevels("need at least one level")
    if 2 ** (levels - 1) > min(r.width, r.height):
        raise TooManyLevels(f"{levels} levels too many for {r.width}x{r.height}")
    out = [r]
    data = r.data.astype(np.float64)
    for _ in range(levels - 1):
        data = _downsample2(data)
        out.append(Raster(data, r.kind))
    return Pyramid(out)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def central_gradients(d):
    """Array-level image_gradients on a float64 (H, W[, C]) plane."""
    d = np.asarray(d, dtype=np.float64)
    gx = np.empty_like(d)
    gx[:, 1:-1] = 0.5 * (d[:, 2:] - d[:, :-2])
    gx[:, 0] = d[:, 1] - d[:, 0]
    gx[:, -1] = d[:, -1] - d[:, -2]
    gy = np.empty_like(d)
    gy[1:-1, :] = 0.5 * (d[2:, :] - d[:-2, :])
    gy[0, :] = d[1, :] - d[0, :]
    gy[-1, :] = d[-1, :] - d[-2, :]
    return gx, gy


def image_gradients(r: Raster):
    """Central differences interior, one-sided at borders. Returns (gx, gy)."""
    if r.width < 2 or r.height < 2:
        raise ValueError("raster too small for gradients")
    gx, gy = central_gradients(r.data)
    return Raster(gx, r.kind), Raster(gy, r.kind)


def gradient_adjoint(wx, wy):
    """Adjoint of the image_gradients operator.

    Given cotangents (wx, wy) of (gx, gy), returns the cotangent of the input
    plane. Needed by losses that differentiate through depth gradients.
    """
    wx = np.asarray(wx, dtype=np.float64)
    wy = np.asarray(wy, dtype=np.float64)
    out = np.zeros_like(wx)
    # x direction: interior gx[:, j] = (d[:, j+1] - d[:, j-1]) / 2
    out[:, 2:] += 0.5 * wx[:, 1:-1]
    out[:, :-2] -= 0.5 * wx[:, 1:-1]
    out[:, 1] += wx[:, 0]
    out[:, 0] -= wx[:, 0]
    out[:, -1] += wx[:, -1]
    out[:, -2] -= wx[:, -1]
    # y direction
    out[2:, :] += 0.5 * wy[1:-1, :]
    out[:-2, :] -= 0.5 * wy[1:-1, :]
    out[1, :] += wy[0, :]
    out[0, :] -= wy[0, :]
    out[-1, :] += wy[-1, :]
    out[-2, :] -= wy[-1, :]
    return out


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def save_png(path, r: Raster):
    """8-bit PNG; values clipped to [0, 1] then quantized."""
    d = np.clip(r.data, 0.0, 1.0)
    arr = np.round(d * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def load_png(path, kind="color") -> Raster:
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    return Raster(arr, kind)


def save_pfm(path, r: Raster):
    """Little-endian PFM. 1-channel -> 'Pf', 3-channel -> 'PF'; 2-channel flow
    is padded with a zero third channel. Rows are stored bottom-to-top as the
    PFM format requires.
    Positive values look toward +u/+v for flow (sign convention: displacement
    target - source in pixel coordinates)."""
    d = r.data.astype(np.float32)
    if d.shape[2] == 2:
        d = np.concatenate([d, np.zeros_like(d[:, :, :1])], axis=2)
    if d.shape[2] == 1:
        header = b"Pf\n"
        plane = d[:, :, 0]
    elif d.shape[2] == 3:
        header = b"PF\n"
        plane = d
    else:
        raise ValueError("PFM supports 1 or 3 channels")
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{d.shape[1]} {d.shape[0]}\n".encode())
        f.write(b"-1.0\n")  # negative scale = little endian
        f.write(np.flipud(plane).astype("<f4").tobytes())


def load_pfm(path, kind="depth") -> Raster:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError("not a PFM file")
        w, h = (int(s) for s in f.readline().split())
        scale = float(f.readline())
        c = 3 if header == b"PF" else 1
        dt = "<f4" if scale < 0 else ">f4"
        plane = np.frombuffer(f.read(w * h * c * 4), dtype=dt).reshape(h, w, c)
    data = np.flipud(plane).astype(np.float32)
    if kind == "flow" and c == 3:
        data = data[:, :, :2]
    return Raster(data, kind)
