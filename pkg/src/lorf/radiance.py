"""Incremental local radiance fields: multiresolution hash-grid encoding, a
tiny two-head MLP, stratified volume rendering with hand-derived analytic
backpropagation, Adam training of the single active field, and the
spawn/freeze lifecycle with a frozen-field color prior.

All parameters live in float64 so gradients can be finite-difference checked;
checkpoints serialize 32-bit planes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRay, FrozenField, NoOverlapRays
from .geometry import Pose, Rotation, contract, outside_contracted_cube

GRID_LEVELS = 8
GRID_TABLE = 1 << 16
GRID_FEAT = 2
GRID_RES_MIN = 16
GRID_RES_MAX = 256
GEO_DIM = 15
HIDDEN = 64
SH_DIM = 9

_PRIMES = (np.uint64(73856093), np.uint64(19349663), np.uint64(83492791))


# ---------------------------------------------------------------------------
# hash grid
# ---------------------------------------------------------------------------

def grid_resolutions(levels=GRID_LEVELS, r_min=GRID_RES_MIN, r_max=GRID_RES_MAX):
    """Geometric resolution ladder r_min .. r_max inclusive."""
    if levels == 1:
        return np.array([r_min])
    g = (r_max / r_min) ** (1.0 / (levels - 1))
    return np.round(r_min * g ** np.arange(levels)).astype(int)


@dataclass
class HashGrid:
    table: np.ndarray            # (levels, table_size, feat) float64
    resolutions: np.ndarray      # (levels,) int

    @property
    def levels(self):
        return self.table.shape[0]

    @property
    def feat_dim(self):
        return self.table.shape[0] * self.table.shape[2]

    @staticmethod
    def create(rng, levels=GRID_LEVELS, table_size=GRID_TABLE, feat=GRID_FEAT):
        table = rng.uniform(-1e-4, 1e-4, size=(levels, table_size, feat))
        return HashGrid(table, grid_resolutions(levels))


def _hash_corners(ix, iy, iz, table_size):
    """Spatial hash: XOR of coordinate-wise prime multiplies, modulo table."""
    h = (ix.astype(np.uint64) * _PRIMES[0]
         ^ iy.astype(np.uint64) * _PRIMES[1]
         ^ iz.astype(np.uint64) * _PRIMES[2])
    return (h % np.uint64(table_size)).astype(np.int64)


def hash_encode(grid: HashGrid, x, with_cache=False):
    """Encode contracted points x (N, 3) in [-2, 2]^3.

    Returns (features (N, levels*feat), dx (N, levels*feat, 3)); with
    with_cache=True additionally a cache for entry-gradient scatter.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    n = x.shape[0]
    L = grid.levels
    F = grid.table.shape[2]
    T = grid.table.shape[1]
    feats = np.zeros((n, L, F))
    dx = np.zeros((n, L, F, 3))
    idx_cache = np.zeros((n, L, 8), dtype=np.int64)
    w_cache = np.zeros((n, L, 8))
    offsets = [(cx, cy, cz) for cx in (0, 1) for cy in (0, 1) for cz in (0, 1)]
    for l in range(L):
        res = grid.resolutions[l]
        scale = res / 4.0                     # [-2,2] spans `res` cells
        g = (x + 2.0) * scale
        g0 = np.clip(np.floor(g).astype(np.int64), 0, res - 1)
        f = g - g0
        for c, (cx, cy, cz) in enumerate(offsets):
            w = ((f[:, 0] if cx else 1 - f[:, 0])
                 * (f[:, 1] if cy else 1 - f[:, 1])
                 * (f[:, 2] if cz else 1 - f[:, 2]))
            h = _hash_corners(g0[:, 0] + cx, g0[:, 1] + cy, g0[:, 2] + cz, T)
            entry = grid.table[l, h]          # (N, F)
            feats[:, l] += w[:, None] * entry
            idx_cache[:, l, c] = h
            w_cache[:, l, c] = w
            # d w / d g (per axis), chain to x by `scale`
            dwx = (1.0 if cx else -1.0) * ((f[:, 1] if cy else 1 - f[:, 1])
                                           * (f[:, 2] if cz else 1 - f[:, 2]))
            dwy = (1.0 if cy else -1.0) * ((f[:, 0] if cx else 1 - f[:, 0])
                                           * (f[:, 2] if cz else 1 - f[:, 2]))
            dwz = (1.0 if cz else -1.0) * ((f[:, 0] if cx else 1 - f[:, 0])
                                           * (f[:, 1] if cy else 1 - f[:, 1]))
            dx[:, l, :, 0] += (dwx * scale)[:, None] * entry
            dx[:, l, :, 1] += (dwy * scale)[:, None] * entry
            dx[:, l, :, 2] += (dwz * scale)[:, None] * entry
    out = feats.reshape(n, L * F)
    dxo = dx.reshape(n, L * F, 3)
    if with_cache:
        return out, dxo, (idx_cache, w_cache)
    return out, dxo


def hash_encode_backward(grid: HashGrid, cache, d_feats):
    """Scatter output cotangents back into a table-shaped gradient array."""
    idx_cache, w_cache = cache
    n, L, _ = idx_cache.shape
    F = grid.table.shape[2]
    d_feats = d_feats.reshape(n, L, F)
    g = np.zeros_like(grid.table)
    for l in range(L):
        for c in range(8):
            np.add.at(g[l], idx_cache[:, l, c],
                      w_cache[:, l, c][:, None] * d_feats[:, l])
    return g


# ---------------------------------------------------------------------------
# spherical harmonics (degree 2, 9 components) for the view direction
# ---------------------------------------------------------------------------

def sh_basis(dirs):
    d = np.asarray(dirs, dtype=float).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.empty((d.shape[0], SH_DIM))
    out[:, 0] = 0.28209479177387814
    out[:, 1] = 0.4886025119029199 * y
    out[:, 2] = 0.4886025119029199 * z
    out[:, 3] = 0.4886025119029199 * x
    out[:, 4] = 1.0925484305920792 * x * y
    out[:, 5] = 1.0925484305920792 * y * z
    out[:, 6] = 0.31539156525252005 * (3 * z * z - 1)
    out[:, 7] = 1.0925484305920792 * x * z
    out[:, 8] = 0.5462742152960396 * (x * x - y * y)
    return out


# ---------------------------------------------------------------------------
# tiny MLP
# ---------------------------------------------------------------------------

@dataclass
class TinyMlp:
    """Two heads: density (grid features -> raw sigma + geometry code) and
    color (geometry code + SH direction encoding -> RGB)."""

    params: dict                 # name -> float64 array

    @staticmethod
    def create(rng, in_dim=GRID_LEVELS * GRID_FEAT, geo=GEO_DIM, hidden=HIDDEN):
        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        p = {
            "d_w1": he((in_dim, hidden), in_dim), "d_b1": np.zeros(hidden),
            "d_w2": he((hidden, 1 + geo), hidden), "d_b2": np.zeros(1 + geo),
            "c_w1": he((geo + SH_DIM, hidden), geo + SH_DIM),
            "c_b1": np.zeros(hidden),
            "c_w2": he((hidden, 3), hidden), "c_b2": np.zeros(3),
        }
        return TinyMlp(p)

    def density(self, feats):
        p = self.params
        pre = feats @ p["d_w1"] + p["d_b1"]
        hid = np.maximum(pre, 0.0)
        out = hid @ p["d_w2"] + p["d_b2"]
        raw, geo = out[:, 0], out[:, 1:]
        sigma = np.logaddexp(0.0, raw)        # softplus
        return sigma, geo, (feats, pre, hid, raw)

    def color(self, geo, sh):
        p = self.params
        inp = np.concatenate([geo, sh], axis=1)
        pre = inp @ p["c_w1"] + p["c_b1"]
        hid = np.maximum(pre, 0.0)
        logits = hid @ p["c_w2"] + p["c_b2"]
        rgb = 1.0 / (1.0 + np.exp(-logits))   # sigmoid
        return rgb, (inp, pre, hid, rgb)

    def density_backward(self, cache, d_sigma, d_geo, grads):
        p = self.params
        feats, pre, hid, raw = cache
        d_out = np.concatenate(
            [(d_sigma / (1.0 + np.exp(-raw)))[:, None], d_geo], axis=1)
        grads["d_w2"] += hid.T @ d_out
        grads["d_b2"] += d_out.sum(axis=0)
        d_hid = (d_out @ p["d_w2"].T) * (pre > 0)
        grads["d_w1"] += feats.T @ d_hid
        grads["d_b1"] += d_hid.sum(axis=0)
        return d_hid @ p["d_w1"].T            # d feats

    def color_backward(self, cache, d_rgb, grads, geo_dim=GEO_DIM):
        p = self.params
        inp, pre, hid, rgb = cache
        d_logits = d_rgb * rgb * (1.0 - rgb)
        grads["c_w2"] += hid.T @ d_logits
        grads["c_b2"] += d_logits.sum(axis=0)
        d_hid = (d_logits @ p["c_w2"].T) * (pre > 0)
        grads["c_w1"] += inp.T @ d_hid
        grads["c_b1"] += d_hid.sum(axis=0)
        d_inp = d_hid @ p["c_w1"].T
        return d_inp[:, :geo_dim]             # d geo (SH input is not learned)


# ---------------------------------------------------------------------------
# local field, field set
# ---------------------------------------------------------------------------

_LIVE_OPTIMIZER_STATES = 0


def live_optimizer_state_count():
    return _LIVE_OPTIMIZER_STATES


class AdamState:
    """Per-parameter first/second moment buffers; counted globally so the
    single-active-field memory property is assertable."""

    def __init__(self, params):
        global _LIVE_OPTIMIZER_STATES
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self._live = True
        _LIVE_OPTIMIZER_STATES += 1

    def release(self):
        global _LIVE_OPTIMIZER_STATES
        if self._live:
            self._live = False
            self.m = self.v = None
            _LIVE_OPTIMIZER_STATES -= 1


@dataclass
class TrainConfig:
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    lambda_depth: float = 0.1
    n_samples: int = 64
    near: float = 0.05
    far: float = 12.0


@dataclass
class LocalField:
    grid: HashGrid
    mlp: TinyMlp
    anchor: Pose                  # world -> field-local
    radius: float = 2.0           # metres mapped onto the unit cube
    frozen: bool = False
    id: int = 0
    background: np.ndarray = None
    opt: AdamState = None
    freeze_checksum: str = None

    def __post_init__(self):
        if self.background is None:
            self.background = np.full(3, 0.5)

    @staticmethod
    def create(anchor: Pose, field_id=0, seed=0, radius=2.0):
        rng = np.random.default_rng(seed)
        return LocalField(HashGrid.create(rng), TinyMlp.create(rng),
                          anchor, radius, False, field_id)

    def parameters(self):
        out = {"grid": self.grid.table, "bg": self.background}
        out.update(self.mlp.params)
        return out

    def to_local(self, points_world):
        return self.anchor.apply(points_world) / self.radius

    def checksum(self):
        h = hashlib.sha256()
        for k in sorted(self.parameters()):
            h.update(np.ascontiguousarray(self.parameters()[k]).tobytes())
        return h.hexdigest()

    def copy_parameters_from(self, other: "LocalField"):
        for k, v in other.parameters().items():
            self.parameters()[k][...] = v


@dataclass
class FieldSet:
    fields: list = field(default_factory=list)
    next_id: int = 0

    @property
    def active(self):
        live = [f for f in self.fields if not f.frozen]
        return live[-1] if live else None

    @property
    def frozen(self):
        return [f for f in self.fields if f.frozen]

    def spawn(self, anchor: Pose, seed=0, radius=2.0):
        f = LocalField.create(anchor, self.next_id, seed, radius)
        f.opt = AdamState(f.parameters())
        self.fields.append(f)
        self.next_id += 1
        return f

    def optimizer_state_count(self):
        return sum(1 for f in self.fields if f.opt is not None)


# ---------------------------------------------------------------------------
# volume rendering
# ---------------------------------------------------------------------------

@dataclass
class RenderResult:
    color: np.ndarray            # (R, 3)
    depth: np.ndarray            # (R,)
    opacity: np.ndarray          # (R,)
    cache: tuple = None


def _resolve_field(fields):
    if isinstance(fields, FieldSet):
        return fields.active
    return fields


def render_rays(fields, origins, dirs, n_samples=64, near=0.05, far=12.0,
                seed=0, with_cache=False) -> RenderResult:
    """Stratified quadrature rendering of R rays against the active field.

    Directions must be nonzero; they are normalized internally. Deterministic
    for a fixed seed.
    """
    fld = _resolve_field(fields)
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateRay("zero-length ray direction")
    if not far > near > 0:
        raise ValueError("need far > near > 0")
    dirs = dirs / norms[:, None]
    R, S = origins.shape[0], n_samples
    rng = np.random.default_rng(seed)
    delta = (far - near) / S
    t = near + (np.arange(S) + rng.uniform(0.0, 1.0, size=(R, S))) * delta

    pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    local = fld.to_local(pts.reshape(-1, 3))
    xc = contract(local)
    feats, _, hcache = hash_encode(fld.grid, xc, with_cache=True)
    sigma, geo, dcache = fld.mlp.density(feats)
    sh = np.repeat(sh_basis(dirs), S, axis=0)
    rgb, ccache = fld.mlp.color(geo, sh)

    sig = sigma.reshape(R, S)
    col = rgb.reshape(R, S, 3)
    tau = sig * delta
    alpha = 1.0 - np.exp(-tau)
    T = np.exp(-np.concatenate([np.zeros((R, 1)), np.cumsum(tau, axis=1)],
                               axis=1))       # (R, S+1); T[:, j] before sample j
    w = T[:, :-1] * alpha                     # (R, S)
    acc = w.sum(axis=1)
    color = (w[:, :, None] * col).sum(axis=1) + (1 - acc)[:, None] * fld.background
    depth = (w * t).sum(axis=1)
    cache = (fld, t, delta, w, T, col, sig, hcache, dcache, ccache) \
        if with_cache else None
    return RenderResult(color, depth, acc, cache)


def render_backward(result: RenderResult, d_color=None, d_depth=None,
                    d_opacity=None):
    """Cotangents of (color, depth, opacity) -> parameter gradient dict for
    the field the result was rendered from."""
    fld, t, delta, w, T, col, sig, hcache, dcache, ccache = result.cache
    R, S = w.shape
    d_color = np.zeros((R, 3)) if d_color is None else np.asarray(d_color, float)
    d_depth = np.zeros(R) if d_depth is None else np.asarray(d_depth, float)
    d_opacity = np.zeros(R) if d_opacity is None else np.asarray(d_opacity, float)

    grads = {k: np.zeros_like(v) for k, v in fld.mlp.params.items()}
    grads["bg"] = ((1 - result.opacity)[:, None] * d_color).sum(axis=0)

    # value rendered as b + sum_i w_i (v_i - b); collect per-sample cotangents
    # q_j = sum over outputs of dL/dV * (v_j - b_V), so that
    # dL/dsigma_j = delta * (T_{j+1} q_j - sum_{i>j} w_i q_i)
    q = (np.einsum("rc,rsc->rs", d_color, col - fld.background[None, None, :])
         + d_depth[:, None] * t + d_opacity[:, None])
    wq = w * q
    suffix = np.flip(np.cumsum(np.flip(wq, axis=1), axis=1), axis=1) - wq
    d_sigma = (delta * (T[:, 1:] * q - suffix)).reshape(-1)
    d_rgb = (w[:, :, None] * d_color[:, None, :]).reshape(-1, 3)

    d_geo = fld.mlp.color_backward(ccache, d_rgb, grads)
    d_feats = fld.mlp.density_backward(dcache, d_sigma, d_geo, grads)
    grads["grid"] = hash_encode_backward(fld.grid, hcache, d_feats)
    return grads


def render_ray(fields, origin, direction, n_samples=64, near=0.05, far=12.0,
               seed=0):
    r = render_rays(fields, [origin], [direction], n_samples, near, far, seed)
    return r.color[0], r.depth[0], r.opacity[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class RayBatch:
    origins: np.ndarray           # (R, 3)
    dirs: np.ndarray              # (R, 3)
    target_rgb: np.ndarray        # (R, 3)
    target_depth: np.ndarray = None  # (R,), optional


def adam_update(params, grads, opt: AdamState, cfg: TrainConfig):
    opt.t += 1
    for k, p in params.items():
        g = grads[k]
        opt.m[k] = cfg.beta1 * opt.m[k] + (1 - cfg.beta1) * g
        opt.v[k] = cfg.beta2 * opt.v[k] + (1 - cfg.beta2) * g * g
        mhat = opt.m[k] / (1 - cfg.beta1 ** opt.t)
        vhat = opt.v[k] / (1 - cfg.beta2 ** opt.t)
        lr = cfg.lr_grid if k == "grid" else cfg.lr_mlp
        p -= lr * mhat / (np.sqrt(vhat) + cfg.eps)


def field_train_step(fld: LocalField, batch: RayBatch, cfg: TrainConfig = None,
                     seed=0, extra_grads=None):
    """One Adam step on L2 color + lambda_d * L1 depth over the batch."""
    if fld.frozen:
        raise FrozenField(f"field {fld.id} is frozen")
    cfg = cfg or TrainConfig()
    res = render_rays(fld, batch.origins, batch.dirs, cfg.n_samples, cfg.near,
                      cfg.far, seed=seed, with_cache=True)
    R = res.color.shape[0]
    c_res = res.color - batch.target_rgb
    loss_c = float((c_res ** 2).mean())
    d_color = 2.0 * c_res / c_res.size
    report = {"color": loss_c}
    d_depth = None
    loss = loss_c
    if batch.target_depth is not None and cfg.lambda_depth > 0:
        d_res = res.depth - batch.target_depth
        loss_d = float(np.abs(d_res).mean())
        d_depth = cfg.lambda_depth * np.sign(d_res) / R
        report["depth"] = loss_d
        loss += cfg.lambda_depth * loss_d
    report["total"] = loss
    grads = render_backward(res, d_color, d_depth)
    if extra_grads is not None:
        for k, g in extra_grads.items():
            grads[k] = grads[k] + g
    if fld.opt is None:
        fld.opt = AdamState(fld.parameters())
    adam_update(fld.parameters(), grads, fld.opt, cfg)
    return report


# ---------------------------------------------------------------------------
# lifecycle
# ---------------------------------------------------------------------------

def sample_frame_rays(pose: Pose, K, n_rays=256, rng=None):
    """Evenly spread pixel-center rays for one camera; returns world origins
    and (unnormalized, unit-z in camera frame) directions."""
    side = max(int(round(np.sqrt(n_rays))), 1)
    us = np.linspace(0, K.width - 1, side)
    vs = np.linspace(0, K.height - 1, side)
    uu, vv = np.meshgrid(us, vs)
    d_cam = np.stack([(uu.ravel() - K.cx) / K.fx,
                      (vv.ravel() - K.cy) / K.fy,
                      np.ones(side * side)], axis=-1)
    R = pose.rotation.as_matrix()
    dirs = d_cam @ R.T
    origins = np.tile(pose.translation, (side * side, 1))
    return origins, dirs


def outside_fraction(fld: LocalField, points_world):
    local = fld.to_local(np.asarray(points_world, dtype=float).reshape(-1, 3))
    return float(np.mean(outside_contracted_cube(local)))


def should_shift(fld: LocalField, frame_poses, K, n_rays=256, near=0.05,
                 far=12.0, threshold=0.8, sample_points=None):
    """True iff strictly more than `threshold` of midpoint ray samples from the
    incoming frames fall outside the field's contracted unit cube."""
    if sample_points is None:
        pts = []
        for pose in frame_poses:
            o, d = sample_frame_rays(pose, K, n_rays)
            pts.append(o + 0.5 * (near + far) * d)
        if not pts:
            return False, 0.0
        sample_points = np.concatenate(pts, axis=0)
    sample_points = np.asarray(sample_points, dtype=float).reshape(-1, 3)
    if sample_points.shape[0] < 1:
        return False, 0.0
    frac = outside_fraction(fld, sample_points)
    return frac > threshold, frac


def shift_field(fset: FieldSet, new_anchor: Pose, incoming_frames,
                seed=None, radius=None):
    """Freeze the active field and spawn a fresh one at `new_anchor`.

    No-op when there are no incoming frames (no evidence to spawn on).
    """
    if not incoming_frames:
        return fset
    old = fset.active
    if old is not None:
        old.frozen = True
        old.freeze_checksum = old.checksum()
        if old.opt is not None:
            old.opt.release()
            old.opt = None
    fset.spawn(new_anchor,
               seed=fset.next_id if seed is None else seed,
               radius=old.radius if radius is None and old else (radius or 2.0))
    return fset


def frozen_color_prior(new_field: LocalField, frozen_field: LocalField,
                       origins, dirs, n_samples=32, near=0.05, far=12.0,
                       seed=0):
    """Mean squared color difference against the frozen field's rendering on
    overlap rays; gradients flow into the new field only."""
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    mid = origins + 0.5 * (near + far) * dirs
    inside_new = ~outside_contracted_cube(new_field.to_local(mid))
    inside_old = ~outside_contracted_cube(frozen_field.to_local(mid))
    keep = inside_new & inside_old
    if not keep.any():
        raise NoOverlapRays("no rays overlap both fields")
    o, d = origins[keep], dirs[keep]
    target = render_rays(frozen_field, o, d, n_samples, near, far, seed).color
    res = render_rays(new_field, o, d, n_samples, near, far, seed,
                      with_cache=True)
    diff = res.color - target
    loss = float((diff ** 2).mean())
    grads = render_backward(res, 2.0 * diff / diff.size)
    return loss, grads


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

_MAGIC = b"LRF1"
_PLANE_ORDER = ("grid", "bg", "d_w1", "d_b1", "d_w2", "d_b2",
                "c_w1", "c_b1", "c_w2", "c_b2")


def save_field(path, fld: LocalField):
    params = fld.parameters()
    header = {
        "levels": int(fld.grid.levels),
        "table": int(fld.grid.table.shape[1]),
        "feat": int(fld.grid.table.shape[2]),
        "resolutions": [int(r) for r in fld.grid.resolutions],
        "mlp_dims": {k: list(v.shape) for k, v in fld.mlp.params.items()},
        "anchor_q": [float(x) for x in fld.anchor.rotation.q],
        "anchor_t": [float(x) for x in fld.anchor.translation],
        "radius": float(fld.radius),
        "frozen": bool(fld.frozen),
        "id": int(fld.id),
        "freeze_checksum": fld.freeze_checksum,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for k in _PLANE_ORDER:
            f.write(np.ascontiguousarray(params[k], dtype="<f4").tobytes())


def load_field(path) -> LocalField:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError("not a field checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        h = json.loads(f.read(hlen))
        anchor = Pose(Rotation(np.array(h["anchor_q"])), np.array(h["anchor_t"]))
        grid = HashGrid(np.zeros((h["levels"], h["table"], h["feat"])),
                        np.array(h["resolutions"]))
        mlp = TinyMlp({k: np.zeros(s) for k, s in h["mlp_dims"].items()})
        fld = LocalField(grid, mlp, anchor, h["radius"], h["frozen"], h["id"],
                         freeze_checksum=h.get("freeze_checksum"))
        for k in _PLANE_ORDER:
            arr = fld.parameters()[k]
            raw = f.read(arr.size * 4)
            arr[...] = np.frombuffer(raw, dtype="<f4").reshape(arr.shape)
    return fld
