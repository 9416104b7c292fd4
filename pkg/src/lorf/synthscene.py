"""Synthetic ground-truth oracle: procedural voxel scenes, an exact DDA
reference renderer, trajectory generators, and flow derivation.

The oracle is deliberately independent of the radiance-field code: it renders
by exact first-hit ray/voxel traversal, no stochastic sampling anywhere.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CameraInsideGeometry
from .geometry import Intrinsics, Pose, Rotation, Trajectory, save_tum, load_tum
from .raster import Raster, save_png, load_png, save_pfm, load_pfm

FAR_SENTINEL = 1.0e4


# ---------------------------------------------------------------------------
# deterministic hash noise (texture source)
# ---------------------------------------------------------------------------

def _hash01(ix, iy, iz, seed):
    """Integer lattice -> uniform [0,1), deterministic, vectorized."""
    h = (ix.astype(np.uint64) * np.uint64(73856093)
         ^ iy.astype(np.uint64) * np.uint64(19349663)
         ^ iz.astype(np.uint64) * np.uint64(83492791)
         ^ np.uint64(seed * 2654435761 & 0xFFFFFFFF))
    h = (h ^ (h >> np.uint64(13))) * np.uint64(0x5DEECE66D)
    h = h ^ (h >> np.uint64(17))
    return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(0x1000000)


def value_noise(p, freq, seed):
    """Trilinearly interpolated lattice noise at world points p (...,3)."""
    q = np.asarray(p, dtype=float) * freq
    q0 = np.floor(q).astype(np.int64)
    f = q - q0
    acc = np.zeros(q.shape[:-1])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[..., 0] if dx else 1 - f[..., 0])
                     * (f[..., 1] if dy else 1 - f[..., 1])
                     * (f[..., 2] if dz else 1 - f[..., 2]))
                acc += w * _hash01(q0[..., 0] + dx, q0[..., 1] + dy,
                                   q0[..., 2] + dz, seed)
    return acc


# ---------------------------------------------------------------------------
# voxel scenes
# ---------------------------------------------------------------------------

@dataclass
class VoxelScene:
    occupancy: np.ndarray          # (n, n, n) bool, index order (ix, iy, iz)
    rgb: np.ndarray                # (n, n, n, 3) float32
    bmin: np.ndarray               # (3,) box lower corner, metres
    voxel_size: float
    seed: int = 0
    generator: str = "custom"
    textured: bool = True

    def __post_init__(self):
        self.bmin = np.asarray(self.bmin, dtype=float).reshape(3)

    @property
    def res(self):
        return self.occupancy.shape[0]

    @property
    def bmax(self):
        return self.bmin + self.voxel_size * np.asarray(self.occupancy.shape)

    def point_to_voxel(self, p):
        return np.floor((np.asarray(p) - self.bmin) / self.voxel_size).astype(int)


def _voxel_colors(n, seed):
    """Smooth per-voxel base colors: low-frequency value noise sampled at voxel
    centres. Smoothness matters — hard colour steps between voxels would alias
    in the renders and bias sub-pixel photometric alignment."""
    c = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(n),
                             indexing="ij"), axis=-1) + 0.5
    chans = [0.35 + 0.6 * value_noise(c, 1.0 / 16.0, seed + 1 + k)
             for k in range(3)]
    return np.stack(chans, axis=-1).astype(np.float32)


def make_scene(generator: str, seed: int = 0, res: int = 128) -> VoxelScene:
    """Procedural scenes: 'room', 'corridor', 'pedestal', 'flat', 'empty'."""
    occ = np.zeros((res, res, res), dtype=bool)
    if generator == "empty":
        return VoxelScene(occ, np.zeros((res, res, res, 3), np.float32),
                          np.full(3, -3.0), 6.0 / res, seed, generator)
    if generator in ("room", "flat", "pedestal"):
        # hollow 6 m box centred at origin, walls one voxel thick
        bmin = np.full(3, -3.0)
        vs = 6.0 / res
        occ[[0, -1], :, :] = True
        occ[:, [0, -1], :] = True
        occ[:, :, [0, -1]] = True
        if generator == "pedestal":
            c, w = res // 2, max(res // 16, 2)
            occ[c - w:c + w, c - w:c + w, c - w:c + w] = True
    elif generator == "corridor":
        # long tube along +z: x,y in [-1.5, 1.5], z in [-1, 23]
        vs = 24.0 / res
        bmin = np.array([-1.5, -1.5, -1.0])
        nx = max(int(round(3.0 / vs)), 4)
        sub = occ[:nx, :nx, :]
        sub[[0, nx - 1], :, :] = True
        sub[:, [0, nx - 1], :] = True
        occ[:nx, :nx, [0, -1]] = True
    else:
        raise ValueError(f"unknown generator {generator!r}")
    if generator == "flat":
        # deliberately textureless: uniform colour everywhere
        rgb = np.full((res, res, res, 3), 0.6, dtype=np.float32)
    else:
        rgb = _voxel_colors(res, seed)
    return VoxelScene(occ, rgb, bmin, vs, seed, generator,
                      textured=(generator != "flat"))


# ---------------------------------------------------------------------------
# DDA traversal + reference renderer
# ---------------------------------------------------------------------------

def trace_rays(scene: VoxelScene, origin, dirs):
    """First-hit traversal of many rays from one origin.

    dirs may be unnormalized; the returned t is in units of |dir| (callers pass
    camera rays with unit z so t is z-depth). Returns (t, hit_mask, hit_voxel).
    """
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    n_rays = dirs.shape[0]
    o = np.asarray(origin, dtype=float).reshape(3)
    n = scene.res
    vs = scene.voxel_size
    bmin, bmax = scene.bmin, scene.bmax

    d = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    inv = 1.0 / d
    t_lo = (bmin - o) * inv
    t_hi = (bmax - o) * inv
    t0 = np.maximum(np.minimum(t_lo, t_hi).max(axis=1), 0.0)
    t1 = np.maximum(t_lo, t_hi).min(axis=1)
    alive = t0 < t1

    eps = 1e-9 * max(1.0, np.abs(bmax).max())
    t_cur = t0 + eps
    p = o[None, :] + t_cur[:, None] * dirs
    vox = np.floor((p - bmin) / vs).astype(np.int64)
    vox = np.clip(vox, 0, n - 1)

    step = np.sign(d).astype(np.int64)
    t_delta = np.abs(vs * inv)
    # parameter at which the ray crosses the next voxel boundary per axis
    next_bound = bmin + (vox + (step > 0)) * vs
    t_next = (next_bound - o) * inv

    t_hit = np.full(n_rays, np.inf)
    hit_voxel = np.full((n_rays, 3), -1, dtype=np.int64)
    hit = np.zeros(n_rays, dtype=bool)
    entry_t = t_cur.copy()

    max_steps = 3 * n + 2
    for _ in range(max_steps):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        v = vox[idx]
        occ = scene.occupancy[v[:, 0], v[:, 1], v[:, 2]]
        newly = idx[occ]
        hit[newly] = True
        t_hit[newly] = entry_t[newly]
        hit_voxel[newly] = vox[newly]
        alive[newly] = False
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        axis = np.argmin(t_next[idx], axis=1)
        tn = t_next[idx, axis]
        entry_t[idx] = tn
        vox[idx, axis] += step[idx, axis]
        t_next[idx, axis] += t_delta[idx, axis]
        out = (vox[idx, axis] < 0) | (vox[idx, axis] >= n) | (tn > t1[idx])
        alive[idx[out]] = False
    return t_hit, hit, hit_voxel


def _sample_rgb_trilinear(scene: VoxelScene, points):
    """Trilinearly interpolate the voxel colour grid at world points, treating
    colours as samples at voxel centres. Continuous shading avoids per-voxel
    colour steps that would alias in the renders."""
    n = scene.res
    g = (np.asarray(points, dtype=float) - scene.bmin) / scene.voxel_size - 0.5
    g = np.clip(g, 0.0, n - 1.0)
    g0 = np.minimum(np.floor(g).astype(int), n - 2)
    f = g - g0
    out = np.zeros((len(g), 3))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[:, 0] if dx else 1 - f[:, 0])
                     * (f[:, 1] if dy else 1 - f[:, 1])
                     * (f[:, 2] if dz else 1 - f[:, 2]))
                out += w[:, None] * scene.rgb[g0[:, 0] + dx, g0[:, 1] + dy,
                                              g0[:, 2] + dz]
    return out


def _shade(scene: VoxelScene, points, voxels):
    base = _sample_rgb_trilinear(scene, points)
    if not scene.textured:
        return base
    tex = (0.45
           + 0.35 * value_noise(points, 1.5, scene.seed + 11)
           + 0.20 * value_noise(points, 6.0, scene.seed + 12))
    return base * tex[:, None]


def _trace_pixels(scene, cam, R, K, du, dv):
    u, vv = np.meshgrid(np.arange(K.width), np.arange(K.height))
    dirs_cam = np.stack([(u.ravel() + du - K.cx) / K.fx,
                         (vv.ravel() + dv - K.cy) / K.fy,
                         np.ones(K.width * K.height)], axis=-1)
    dirs_world = dirs_cam @ R.T
    t, hit, vox = trace_rays(scene, cam, dirs_world)
    return t, hit, vox, dirs_world


def render_reference(scene: VoxelScene, pose: Pose, K: Intrinsics,
                     background=(0.5, 0.5, 0.5), supersample: int = 2):
    """Exact first-hit render. `pose` is camera-to-world.

    Depth is the z-depth of the exact center ray per pixel (misses carry the
    far sentinel). Color is box-averaged over supersample^2 subpixel rays to
    keep it close to band-limited; supersample=1 point-samples at the center.
    """
    cam = pose.translation
    v = scene.point_to_voxel(cam)
    if np.all(v >= 0) and np.all(v < scene.res):
        if scene.occupancy[v[0], v[1], v[2]]:
            raise CameraInsideGeometry(f"camera at {cam} inside occupied voxel")
    R = pose.rotation.as_matrix()
    bg = np.asarray(background, dtype=np.float64)
    n_pix = K.width * K.height

    def shade_pass(du, dv):
        t, hit, vox, dirs = _trace_pixels(scene, cam, R, K, du, dv)
        color = np.tile(bg, (n_pix, 1))
        if hit.any():
            pts = cam[None, :] + t[hit, None] * dirs[hit]
            color[hit] = np.clip(_shade(scene, pts, vox[hit]), 0.0, 1.0)
        return t, hit, color

    t, hit, color_c = shade_pass(0.0, 0.0)
    depth = np.where(hit, t, FAR_SENTINEL)
    if supersample <= 1:
        color = color_c
    else:
        s = supersample
        color = np.zeros((n_pix, 3))
        for i in range(s):
            for j in range(s):
                du = (i + 0.5) / s - 0.5
                dv = (j + 0.5) / s - 0.5
                color += shade_pass(du, dv)[2]
        color /= s * s
    return (Raster(color.reshape(K.height, K.width, 3), "color"),
            Raster(depth.reshape(K.height, K.width), "depth"))


# ---------------------------------------------------------------------------
# trajectory generators
# ---------------------------------------------------------------------------

def _look_rotation(forward, up=(0.0, 1.0, 0.0)):
    """Camera-to-world rotation with camera +z along `forward`. With the
    default up the rotation is exactly identity for forward = +z."""
    f = np.asarray(forward, dtype=float)
    f = f / np.linalg.norm(f)
    x = np.cross(np.asarray(up, dtype=float), f)
    if np.linalg.norm(x) < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    x = x / np.linalg.norm(x)
    y = np.cross(f, x)
    return Rotation.from_matrix(np.stack([x, y, f], axis=1))


def generate_trajectory(kind: str, length, seed: int = 0, n_frames: int = 48,
                        radius: float = 1.5) -> Trajectory:
    """Smooth pose paths: 'orbit' | 'corridor' | 'hike'.

    `length` is the spanned distance for corridor/hike (metres) and ignored
    for orbit (use `radius`). Deterministic in (kind, seed).
    """
    if n_frames < 2:
        raise ValueError("need at least two frames")
    rng = np.random.default_rng(seed)
    ts = np.arange(n_frames, dtype=float)
    poses = []
    if kind == "orbit":
        phases = np.linspace(0.0, 1.5 * np.pi, n_frames)
        phase0 = rng.uniform(0, 2 * np.pi)
        for ph in phases:
            a = phase0 + ph
            pos = np.array([radius * np.cos(a), 0.0, radius * np.sin(a)])
            poses.append(Pose(_look_rotation(-pos), pos))
    elif kind == "corridor":
        s = np.linspace(0.0, 1.0, n_frames)
        sway_a = 0.25
        for si in s:
            z = si * length
            x = sway_a * np.sin(2 * np.pi * si)
            dz = length / 1.0
            dxds = sway_a * 2 * np.pi * np.cos(2 * np.pi * si)
            fwd = np.array([dxds, 0.0, dz])
            poses.append(Pose(_look_rotation(fwd), np.array([x, 0.0, z])))
        # pin the gauge frame exactly
        poses[0] = Pose.identity()
    elif kind == "hike":
        s = np.linspace(0.0, 1.0, n_frames)
        a1, a2 = rng.uniform(0.1, 0.35, size=2)
        p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
        for si in s:
            z = si * length
            x = a1 * np.sin(2 * np.pi * si + p1) - a1 * np.sin(p1)
            y = a2 * 0.3 * (np.sin(3 * np.pi * si + p2) - np.sin(p2))
            dx = a1 * 2 * np.pi * np.cos(2 * np.pi * si + p1)
            fwd = np.array([dx / max(length, 1e-6), 0.0, 1.0])
            poses.append(Pose(_look_rotation(fwd), np.array([x, y, z])))
        poses[0] = Pose.identity()
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return Trajectory(ts, poses)


# ---------------------------------------------------------------------------
# flow derivation
# ---------------------------------------------------------------------------

def derive_flow(depth_a: Raster, pose_a: Pose, pose_b: Pose, K: Intrinsics,
                depth_b: Raster = None, occl_thresh: float = 0.5):
    """Flow a->b from ground-truth depth and poses.

    Returns (flow Raster (H,W,2), occlusion mask (H,W) bool: True = occluded
    or invalid). If depth_b is given, occlusion is tested by forward-backward
    consistency of the two induced flows.
    """
    h, w = depth_a.height, depth_a.width
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pix = np.stack([u.ravel(), v.ravel()], axis=-1)
    d = depth_a.data[:, :, 0].astype(np.float64).ravel()
    T_ab = pose_b.inverse().compose(pose_a)
    from .geometry import warp_points
    pix_b, z_b, valid = warp_points(T_ab, K, pix, d)
    in_bounds = ((pix_b[:, 0] >= 0) & (pix_b[:, 0] <= w - 1)
                 & (pix_b[:, 1] >= 0) & (pix_b[:, 1] <= h - 1))
    valid = valid & in_bounds & (d < FAR_SENTINEL)
    flow = np.where(valid[:, None], pix_b - pix, 0.0)
    occluded = ~valid
    if depth_b is not None:
        bwd_flow, _ = derive_flow(depth_b, pose_b, pose_a, K)
        from .raster import sample_bilinear_many
        bf, _, sval = sample_bilinear_many(Raster(bwd_flow.data, "flow"), pix_b)
        rt = np.linalg.norm(flow + bf, axis=-1)
        occluded = occluded | ~sval | (rt > occl_thresh)
    return (Raster(flow.reshape(h, w, 2), "flow"),
            occluded.reshape(h, w))


# ---------------------------------------------------------------------------
# dataset container and directory layout
# ---------------------------------------------------------------------------

@dataclass
class SyntheticDataset:
    scene: VoxelScene
    K: Intrinsics
    gt_trajectory: Trajectory
    colors: list = field(default_factory=list)    # Raster per frame
    depths: list = field(default_factory=list)    # Raster per frame
    flows_fwd: dict = field(default_factory=dict)  # t -> (Raster, occl mask)
    flows_bwd: dict = field(default_factory=dict)  # t -> flow t+1 -> t
    seed: int = 0

    def __len__(self):
        return len(self.colors)


def generate_dataset(generator="corridor", traj_kind="corridor", n_frames=48,
                     width=96, height=96, seed=7, length=None, res=128,
                     fov_deg=70.0, with_flow=True) -> SyntheticDataset:
    scene = make_scene(generator, seed=seed, res=res)
    if length is None:
        length = 18.0 if traj_kind in ("corridor", "hike") else 0.0
    traj = generate_trajectory(traj_kind, length, seed=seed, n_frames=n_frames)
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    K = Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    ds = SyntheticDataset(scene, K, traj, seed=seed)
    for pose in traj.poses:
        c, d = render_reference(scene, pose, K)
        ds.colors.append(c)
        ds.depths.append(d)
    if with_flow:
        for t in range(n_frames - 1):
            ds.flows_fwd[t] = derive_flow(ds.depths[t], traj.poses[t],
                                          traj.poses[t + 1], K, ds.depths[t + 1])
            ds.flows_bwd[t] = derive_flow(ds.depths[t + 1], traj.poses[t + 1],
                                          traj.poses[t], K, ds.depths[t])
    return ds


def write_dataset(ds: SyntheticDataset, out_dir):
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "flow"), exist_ok=True)
    for i, (c, d) in enumerate(zip(ds.colors, ds.depths)):
        save_png(os.path.join(out_dir, "frames", f"{i:06d}.png"), c)
        save_pfm(os.path.join(out_dir, "depth", f"{i:06d}.pfm"), d)
    for t, (fl, _) in ds.flows_fwd.items():
        save_pfm(os.path.join(out_dir, "flow", f"{t:06d}_fwd.pfm"), fl)
    for t, (fl, _) in ds.flows_bwd.items():
        save_pfm(os.path.join(out_dir, "flow", f"{t:06d}_bwd.pfm"), fl)
    save_tum(os.path.join(out_dir, "gt_trajectory.txt"), ds.gt_trajectory)
    with open(os.path.join(out_dir, "intrinsics.json"), "w") as f:
        json.dump(ds.K.as_dict(), f, indent=1)
    manifest = {"seed": ds.seed, "generator": ds.scene.generator,
                "n_frames": len(ds), "version": 1}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_dataset(in_dir) -> SyntheticDataset:
    with open(os.path.join(in_dir, "manifest.json")) as f:
        manifest = json.load(f)
    with open(os.path.join(in_dir, "intrinsics.json")) as f:
        K = Intrinsics.from_dict(json.load(f))
    traj = load_tum(os.path.join(in_dir, "gt_trajectory.txt"))
    n = manifest["n_frames"]
    scene = make_scene(manifest["generator"], seed=manifest["seed"])
    ds = SyntheticDataset(scene, K, traj, seed=manifest["seed"])
    for i in range(n):
        ds.colors.append(load_png(os.path.join(in_dir, "frames", f"{i:06d}.png")))
        ds.depths.append(load_pfm(os.path.join(in_dir, "depth", f"{i:06d}.pfm")))
    for t in range(n - 1):
        fp = os.path.join(in_dir, "flow", f"{t:06d}_fwd.pfm")
        bp = os.path.join(in_dir, "flow", f"{t:06d}_bwd.pfm")
        if os.path.exists(fp):
            ds.flows_fwd[t] = (load_pfm(fp, "flow"), None)
        if os.path.exists(bp):
            ds.flows_bwd[t] = (load_pfm(bp, "flow"), None)
    return ds
