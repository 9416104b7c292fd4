"""Feature-metric bundle adjustment: confidence-weighted multi-scale residuals,
robust Huber objective via IRLS, and a coarse-to-fine Levenberg-Marquardt
refinement of the relative pose (optionally the focal lengths).

The learned U-Net feature/confidence network is out of scope; the default
provider derives analytic features (intensity + gradient magnitudes) with a
gradient-based confidence, behind the same contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AllPointsInvalid, SolveFailed
from .geometry import Intrinsics, Pose, se3_exp, warp_points
from .raster import Raster, build_pyramid, image_gradients, sample_bilinear_many


# ---------------------------------------------------------------------------
# analytic feature provider
# ---------------------------------------------------------------------------

@dataclass
class AnalyticFeatureProvider:
    """Per-frame feature/confidence pyramids from image content alone.

    Feature channels: [intensity, |gx|, |gy|] of the grayscale pyramid.
    Confidence: gradient magnitude squashed into [0, 1).
    """

    levels: int = 3
    conf_scale: float = 0.1
    _cache: dict = field(default_factory=dict, repr=False)

    def features(self, image: Raster, key=None):
        if key is not None and key in self._cache:
            return self._cache[key]
        gray_pyr = build_pyramid(image.to_gray(), self.levels)
        feats, confs = [], []
        for lvl in gray_pyr.levels:
            gx, gy = image_gradients(lvl)
            f = np.concatenate([lvl.data, np.abs(gx.data), np.abs(gy.data)],
                               axis=2)
            gmag = np.sqrt(gx.data[:, :, 0] ** 2 + gy.data[:, :, 0] ** 2)
            conf = 1.0 - np.exp(-gmag / self.conf_scale)
            feats.append(Raster(f, "feature"))
            confs.append(Raster(conf, "confidence"))
        out = (feats, confs)
        if key is not None:
            self._cache[key] = out
        return out


# ---------------------------------------------------------------------------
# state and point selection
# ---------------------------------------------------------------------------

@dataclass
class BAState:
    pose: Pose
    f: np.ndarray = None          # (fx, fy) when focal refinement is enabled
    mu: float = 1e-3
    level: int = 0

    def with_step(self, delta):
        """Left-multiplicative pose update; additive focal update."""
        pose = se3_exp(delta[:6]).compose(self.pose)
        f = None if self.f is None else self.f + delta[6:8]
        return replace(self, pose=pose, f=f)


@dataclass
class PointSet:
    pixels: np.ndarray   # (N, 2) level-0 pixel coords in frame a
    depths: np.ndarray   # (N,)

    def __len__(self):
        return len(self.depths)


def grid_points(depth_field, grid=32, margin=2, z_near=0.05, z_far=500.0):
    """Uniform SxS sample grid over frame a using the current depth field."""
    h, w = depth_field.shape
    # integer pixels so the stored depth is exact for the sample position
    us = np.unique(np.round(np.linspace(margin, w - 1 - margin, grid)).astype(int))
    vs = np.unique(np.round(np.linspace(margin, h - 1 - margin, grid)).astype(int))
    uu, vv = np.meshgrid(us, vs)
    ui = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    d = depth_field.depth[ui[:, 1], ui[:, 0]]
    ok = (depth_field.valid[ui[:, 1], ui[:, 0]] & (d > z_near) & (d < z_far))
    return PointSet(ui[ok].astype(float), d[ok])


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------

def ba_residuals(level, T_ab: Pose, K: Intrinsics, points: PointSet,
                 feat_a, conf_a, feat_b, refine_focal=False, f=None):
    """Confidence-weighted feature residuals and Jacobians at one level.

    Returns (residuals (M, C), jacobians (M, C, P), valid (N,)) with
    P = 6 (+2 with focal refinement). Invalid points carry zero rows.
    """
    if len(points) == 0:
        raise AllPointsInvalid("empty point set")
    fa, ca, fb = feat_a[level], conf_a[level], feat_b[level]
    Kl = K if f is None else Intrinsics(f[0], f[1], K.cx, K.cy, K.width, K.height)
    Kl = Kl.scaled(level)
    s = 2 ** level
    off = (s - 1) / 2.0
    pix_a_l = (points.pixels - off) / s

    pix_b, _, wvalid, jac = warp_points(T_ab, Kl, pix_a_l, points.depths,
                                        with_jacobian=True)
    vals_b, grads_b, svalid = sample_bilinear_many(fb, pix_b)
    vals_a, _, avalid = sample_bilinear_many(fa, pix_a_l)
    conf, _, _ = sample_bilinear_many(ca, pix_a_l)
    valid = wvalid & svalid & avalid
    if not valid.any():
        raise AllPointsInvalid(f"no valid points at level {level}")

    wgt = conf[:, 0] * valid
    res = wgt[:, None] * (vals_b - vals_a)            # (N, C)
    P = 8 if refine_focal else 6
    J = np.zeros((len(points), res.shape[1], P))
    # d residual / d pixel_b = wgt * grad_b  (a-side terms are constant)
    dr_duv = wgt[:, None, None] * np.transpose(grads_b, (0, 2, 1))  # (N, C, 2)
    J[:, :, :6] = np.einsum("nck,nkj->ncj", dr_duv, jac.pix_twist)
    if refine_focal:
        # chain through the level scaling of (fx, fy)
        J[:, :, 6:8] = np.einsum("nck,nkj->ncj", dr_duv, jac.pix_f) / s
    res[~valid] = 0.0
    J[~valid] = 0.0
    return res, J, valid


# ---------------------------------------------------------------------------
# robust LM
# ---------------------------------------------------------------------------

def huber_weight(r_sq, gamma):
    """IRLS weight of the Huber penalty applied to a squared residual norm."""
    r = np.sqrt(np.maximum(r_sq, 0.0))
    return np.where(r <= gamma, 1.0, gamma / np.maximum(r, 1e-300))


def huber_cost(res, gamma):
    """Sum of Huber penalties of per-point residual norms."""
    r = np.linalg.norm(np.atleast_2d(res), axis=-1)
    quad = 0.5 * r * r
    lin = gamma * r - 0.5 * gamma * gamma
    return float(np.where(r <= gamma, quad, lin).sum())


@dataclass
class StepReport:
    accepted: bool
    cost_before: float
    cost_after: float
    mu_before: float
    mu_after: float
    step_norm: float = 0.0


def lm_step(residual_fn, state: BAState, gamma=0.1):
    """One damped step: solve (J'WJ + mu diag(J'WJ)) d = -J'Wr with IRLS Huber
    weights; accept iff the robust cost decreases."""
    res, J = residual_fn(state)
    res = np.atleast_2d(res)
    if J.ndim == 2:
        J = J[:, None, :]
    cost = huber_cost(res, gamma)
    w = huber_weight((res * res).sum(axis=-1), gamma)
    Jw = J * w[:, None, None]
    H = np.einsum("ncp,ncq->pq", Jw, J)
    g = np.einsum("ncp,nc->p", Jw, res)
    diag = np.diag(np.maximum(np.diag(H), 1e-12))
    try:
        delta = np.linalg.solve(H + state.mu * diag, -g)
        if not np.all(np.isfinite(delta)):
            raise np.linalg.LinAlgError("non-finite step")
    except np.linalg.LinAlgError as e:
        raise SolveFailed(str(e)) from e
    candidate = state.with_step(delta)
    try:
        new_res, _ = residual_fn(candidate)
        new_cost = huber_cost(np.atleast_2d(new_res), gamma)
    except (AllPointsInvalid, ValueError):
        # candidate left the valid domain (e.g. nonpositive focal): reject
        new_cost = np.inf
    if new_cost < cost:
        out = replace(candidate, mu=max(state.mu / 3.0, 1e-12))
        return out, StepReport(True, cost, new_cost, state.mu, out.mu,
                               float(np.linalg.norm(delta)))
    out = replace(state, mu=state.mu * 5.0)
    return out, StepReport(False, cost, cost, state.mu, out.mu,
                           float(np.linalg.norm(delta)))


@dataclass
class BAConfig:
    levels: int = 3
    iters_per_level: int = 2
    gamma: float = 0.1
    mu0: float = 1e-3
    grid: int = 32
    refine_focal: bool = False


@dataclass
class BAResult:
    pose: Pose
    f: np.ndarray
    traces: list          # list of (level, iter, cost, mu, accepted)
    refined: bool


def coarse_to_fine_ba(img_a: Raster, img_b: Raster, K: Intrinsics,
                      init_T: Pose, depth_a, provider=None,
                      config: BAConfig = None, keys=(None, None)) -> BAResult:
    """Cascade the pose from the coarsest to the finest feature level with a
    fixed number of LM iterations per level."""
    config = config or BAConfig()
    provider = provider or AnalyticFeatureProvider(levels=config.levels)
    feat_a, conf_a = provider.features(img_a, keys[0])
    feat_b, _ = provider.features(img_b, keys[1])
    points = grid_points(depth_a, config.grid)
    state = BAState(init_T,
                    f=np.array([K.fx, K.fy]) if config.refine_focal else None,
                    mu=config.mu0)
    traces = []
    refined = False
    for level in range(config.levels - 1, -1, -1):
        def residual_fn(st, level=level):
            r, J, _ = ba_residuals(level, st.pose, K, points, feat_a, conf_a,
                                   feat_b, refine_focal=config.refine_focal,
                                   f=st.f)
            return r, J
        state = replace(state, level=level, mu=config.mu0)
        for it in range(config.iters_per_level):
            try:
                state, rep = lm_step(residual_fn, state, gamma=config.gamma)
            except AllPointsInvalid:
                break
            except SolveFailed:
                state = replace(state, mu=state.mu * 5.0)
                continue
            traces.append((level, it, rep.cost_after, rep.mu_after,
                           rep.accepted))
            refined = refined or rep.accepted
    return BAResult(state.pose, state.f, traces, refined)
