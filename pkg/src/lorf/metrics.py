"""Trajectory and image-quality evaluation: Umeyama alignment (SE3/Sim3),
absolute trajectory error, relative pose error, PSNR, and single-scale SSIM.

All functions are pure. Alignment defaults to SE3 because the reconstruction
claims metric scale; Sim3 is available for comparison (a scale-corrupted
trajectory scores ~0 under Sim3 but strictly positive under SE3).
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateGeometry, ShapeMismatch, TooShort, TooSmall
from .geometry import Pose, Rotation, Trajectory

ASSOC_TOL = 0.02     # seconds; nearest-timestamp association window


def associate(est: Trajectory, gt: Trajectory, tol=ASSOC_TOL):
    """Pair each estimated pose with the nearest ground-truth timestamp
    within `tol`. Returns two lists of poses."""
    gts = np.asarray(gt.timestamps)
    pairs_e, pairs_g = [], []
    for ts, pe in zip(est.timestamps, est.poses):
        j = int(np.argmin(np.abs(gts - ts)))
        if abs(gts[j] - ts) <= tol:
            pairs_e.append(pe)
            pairs_g.append(gt.poses[j])
    return pairs_e, pairs_g


def umeyama_align(est: Trajectory, gt: Trajectory, mode="se3"):
    """Least-squares (similarity) transform g ~ s R e + t over associated
    positions. SE3 mode fixes s = 1. Returns (Pose, scale)."""
    if mode not in ("se3", "sim3"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    pe, pg = associate(est, gt)
    if len(pe) < 3:
        raise DegenerateGeometry("need at least 3 associated poses")
    E = np.stack([p.translation for p in pe])
    G = np.stack([p.translation for p in pg])
    mu_e, mu_g = E.mean(axis=0), G.mean(axis=0)
    Ec, Gc = E - mu_e, G - mu_g
    cov = Gc.T @ Ec / len(E)
    U, D, Vt = np.linalg.svd(cov)
    # collinear/coincident points leave the rotation underdetermined
    if D[1] < 1e-12 * max(D[0], 1e-300):
        raise DegenerateGeometry("associated positions are collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if mode == "sim3":
        var_e = (Ec ** 2).sum() / len(E)
        s = float(np.trace(np.diag(D) @ S) / var_e)
    else:
        s = 1.0
    t = mu_g - s * (R @ mu_e)
    return Pose(Rotation.from_matrix(R), t), s


def ate(est: Trajectory, gt: Trajectory, mode="se3"):
    """RMSE of position residuals after Umeyama alignment, in metres."""
    T, s = umeyama_align(est, gt, mode)
    pe, pg = associate(est, gt)
    E = np.stack([p.translation for p in pe])
    G = np.stack([p.translation for p in pg])
    aligned = s * (E @ T.rotation.as_matrix().T) + T.translation
    return float(np.sqrt(((aligned - G) ** 2).sum(axis=1).mean()))


def rpe(est: Trajectory, gt: Trajectory, delta=1):
    """Relative pose error over frame offset `delta`.

    E_i = (gt_i^-1 gt_{i+d})^-1 (est_i^-1 est_{i+d}); returns
    (rotation RMSE in degrees, translation RMSE in metres).
    """
    n = min(len(est), len(gt))
    if n < delta + 1:
        raise TooShort(f"need at least {delta + 1} frames, have {n}")
    angs, trans = [], []
    for i in range(n - delta):
        d_gt = gt.poses[i].inverse().compose(gt.poses[i + delta])
        d_est = est.poses[i].inverse().compose(est.poses[i + delta])
        err = d_gt.inverse().compose(d_est)
        angs.append(err.rotation.angle)
        trans.append(np.linalg.norm(err.translation))
    rpe_r = float(np.degrees(np.sqrt(np.mean(np.square(angs)))))
    rpe_t = float(np.sqrt(np.mean(np.square(trans))))
    return rpe_r, rpe_t


# ---------------------------------------------------------------------------
# image quality
# ---------------------------------------------------------------------------

def _as_array(img):
    data = getattr(img, "data", img)
    return np.asarray(data, dtype=float)


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE); identical images report the 99 dB cap."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return 99.0
    return float(min(10.0 * np.log10(peak * peak / mse), 99.0))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _window_mean(img, win):
    """Separable valid-mode correlation of a 2D image with an outer-product
    Gaussian window."""
    v = np.lib.stride_tricks.sliding_window_view(img, len(win), axis=0)
    v = np.tensordot(v, win, axes=([2], [0]))
    h = np.lib.stride_tricks.sliding_window_view(v, len(win), axis=1)
    return np.tensordot(h, win, axes=([2], [0]))


def ssim(a, b, peak=1.0, win_size=11, sigma=1.5):
    """Single-scale SSIM with an 11x11 Gaussian window (sigma = 1.5),
    C1 = (0.01 peak)^2, C2 = (0.03 peak)^2, averaged over pixels (and
    channels for multichannel input)."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < win_size or a.shape[1] < win_size:
        raise TooSmall(f"image {a.shape[:2]} smaller than {win_size}x{win_size}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    win = _gaussian_window(win_size, sigma)
    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx, my = _window_mean(x, win), _window_mean(y, win)
        vx = _window_mean(x * x, win) - mx * mx
        vy = _window_mean(y * y, win) - my * my
        vxy = _window_mean(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * vxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(num / den)
    return float(np.mean(vals))
