"""Progressive windowed optimization: bootstrap over the first frames, then
fixed-size windows with three phases (depth warm-up, feature-metric pose
refine, radiance fine-tune), constant-velocity pose initialization, flow
consistency via a provider contract, and field shifting between windows.

Phase isolation is strict: the depth phase never writes poses, the pose phase
never writes radiance parameters. Windows are transactional — any failure
restores the pre-window state.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .depth_objective import (DepthField, LossWeights, MetricAnchorConfig,
                              depth_loss, metric_loss, noisy_depth_provider,
                              photometric_loss, smoothness_loss)
from .errors import (AllPointsInvalid, InsufficientFrames, ProviderUnavailable,
                     SolveFailed)
from .feature_ba import (AnalyticFeatureProvider, BAConfig, BAState,
                         ba_residuals, coarse_to_fine_ba, grid_points,
                         huber_cost, lm_step)
from .geometry import Intrinsics, Pose, Trajectory, warp_points
from .radiance import (FieldSet, RayBatch, TrainConfig, field_train_step,
                       shift_field, should_shift)
from .raster import Raster
from .synthscene import derive_flow


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ScheduleConfig:
    bootstrap_frames: int = 5
    window: int = 32
    depth_warmup_iters: int = 50
    fba_iters: int = 30
    radiance_iters: int = 30
    shift_fraction: float = 0.8
    anchor_frames: int = 4        # trailing frames kept optimizable
    depth_lr: float = 0.02
    rays_per_iter: int = 256
    field_radius: float = 4.0

    def __post_init__(self):
        for v in (self.bootstrap_frames, self.window, self.depth_warmup_iters,
                  self.fba_iters, self.radiance_iters):
            if v < 1:
                raise ValueError("iteration/frame counts must be >= 1")
        if not 0.0 < self.shift_fraction < 1.0:
            raise ValueError("shift_fraction must be in (0, 1)")

    def to_dict(self):
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# flow providers
# ---------------------------------------------------------------------------

class OracleFlowProvider:
    """Ground-truth flow from the synthetic dataset's depths and poses."""

    name = "oracle"

    def __init__(self, dataset):
        self.ds = dataset

    def flow(self, i, j):
        ds = self.ds
        if not (0 <= i < len(ds) and 0 <= j < len(ds)) or not ds.depths:
            raise ProviderUnavailable(f"no oracle flow for pair ({i}, {j})")
        return derive_flow(ds.depths[i], ds.gt_trajectory.poses[i],
                           ds.gt_trajectory.poses[j], ds.K, ds.depths[j])


class InducedFlowProvider:
    """Flow induced by the current depth and pose estimates."""

    name = "induced"

    def __init__(self, poses, depth_fields, K):
        self.poses = poses
        self.depth_fields = depth_fields
        self.K = K

    def flow(self, i, j):
        if i not in self.depth_fields or j >= len(self.poses) or i >= len(self.poses):
            raise ProviderUnavailable(f"no estimate for pair ({i}, {j})")
        T_ij = self.poses[j].inverse().compose(self.poses[i])
        fl, valid = induced_flow(self.depth_fields[i], T_ij, self.K)
        return Raster(fl, "flow"), ~valid.reshape(fl.shape[:2])


def induced_flow(depth_field: DepthField, T_ab: Pose, K: Intrinsics,
                 with_jacobian=False):
    """Dense flow a->b from a depth field and relative pose; pixels out of
    view or invalid are masked out."""
    h, w = depth_field.shape
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pix = np.stack([u.ravel(), v.ravel()], axis=-1)
    d = depth_field.depth.ravel()
    out = warp_points(T_ab, K, pix, d, with_jacobian=with_jacobian)
    pix_b, _, valid = out[:3]
    flow = (pix_b - pix).reshape(h, w, 2)
    valid = valid & depth_field.valid.ravel()
    if with_jacobian:
        return flow, valid, out[3]
    return flow, valid


@dataclass
class FlowLossResult:
    loss: float
    grad_log_depth_a: np.ndarray
    grad_log_depth_b: np.ndarray
    grad_twist_ab: np.ndarray
    grad_twist_ba: np.ndarray
    n_valid: int = 0


def _flow_direction(depth_field, T_ab, K, target_flow, occl):
    flow, valid, jac = induced_flow(depth_field, T_ab, K, with_jacobian=True)
    h, w = depth_field.shape
    mask = valid & ~np.asarray(occl).ravel()
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros((h, w)), np.zeros(6), 0
    r = (flow - np.asarray(target_flow.data, dtype=float)).reshape(-1, 2)
    r[~mask] = 0.0
    loss = float(np.abs(r[mask]).sum() / n)
    s = np.sign(r) / n
    g_twist = np.einsum("nk,nkj->j", s, jac.pix_twist)
    g_depth = (np.einsum("nk,nk->n", s, jac.pix_depth)
               * depth_field.depth.ravel()).reshape(h, w)
    return loss, g_depth, g_twist, n


def flow_consistency_loss(depth_a: DepthField, depth_b: DepthField,
                          pose_a: Pose, pose_b: Pose, K: Intrinsics,
                          provider, ia, ib) -> FlowLossResult:
    """Mean L1 between induced and provided flow, forward plus backward.

    Raises ProviderUnavailable when the provider cannot serve the pair;
    callers drop the term and count the warning.
    """
    fwd, occ_f = provider.flow(ia, ib)
    bwd, occ_b = provider.flow(ib, ia)
    T_ab = pose_b.inverse().compose(pose_a)
    T_ba = pose_a.inverse().compose(pose_b)
    lf, gda, gta, nf = _flow_direction(depth_a, T_ab, K, fwd, occ_f)
    lb, gdb, gtb, nb = _flow_direction(depth_b, T_ba, K, bwd, occ_b)
    return FlowLossResult(lf + lb, gda, gdb, gta, gtb, nf + nb)


# ---------------------------------------------------------------------------
# joint loss (photometric + depth regularizers + robust BA cost + flow)
# ---------------------------------------------------------------------------

@dataclass
class JointLossResult:
    total: float
    terms: dict
    grad_log_depth: np.ndarray
    grad_twists: dict             # neighbor id -> (6,)
    skipped: list = field(default_factory=list)


def joint_loss(I_t, depth_t: DepthField, pose_t: Pose, neighbors: dict,
               K: Intrinsics, weights: LossWeights, flow_provider=None,
               frame_id=None, feature_provider=None,
               anchor_cfg: MetricAnchorConfig = None) -> JointLossResult:
    """Weighted sum over one frame: photometric warp to each neighbor, depth
    regularizers (smoothness + metric anchor), the robust feature-metric cost
    at the finest level, and forward+backward flow consistency.

    `neighbors` maps frame id -> (I_s, depth_s, pose_s).
    """
    h, w = depth_t.shape
    grad_d = np.zeros((h, w))
    grad_twists = {}
    terms = {"photo": 0.0, "depth": 0.0, "ba": 0.0, "flow": 0.0}
    skipped = []

    if weights.photo > 0:
        for s, (I_s, _, pose_s) in neighbors.items():
            T_ts = pose_s.inverse().compose(pose_t)
            try:
                tr = photometric_loss(I_t, I_s, depth_t, T_ts, K)
            except AllPointsInvalid:
                skipped.append(f"photo:{s}")
                continue
            if tr.n_valid == 0:
                skipped.append(f"photo:{s}")
                continue
            terms["photo"] += tr.loss
            grad_d += weights.photo * tr.grad_log_depth
            grad_twists[s] = (grad_twists.get(s, np.zeros(6))
                              + weights.photo * tr.grad_twist)

    if weights.depth > 0:
        # the depth term is the non-photometric part of the depth objective:
        # edge-aware smoothness plus the metric anchor
        sm = smoothness_loss(depth_t, I_t)
        reg_loss = weights.smooth * sm.loss
        reg_grad = weights.smooth * sm.grad_log_depth
        if anchor_cfg is not None:
            me = metric_loss(depth_t, anchor_cfg)
            reg_loss += weights.metric * me.loss
            reg_grad = reg_grad + weights.metric * me.grad_log_depth
        terms["depth"] = reg_loss
        grad_d += weights.depth * reg_grad

    total = weights.photo * terms["photo"] + weights.depth * terms["depth"]

    if weights.ba > 0 and neighbors:
        fp = feature_provider or AnalyticFeatureProvider(levels=1)
        feat_t, conf_t = fp.features(I_t)
        s, (I_s, _, pose_s) = next(iter(neighbors.items()))
        feat_s, _ = fp.features(I_s)
        pts = grid_points(depth_t)
        T_ts = pose_s.inverse().compose(pose_t)
        try:
            res, J, _ = ba_residuals(0, T_ts, K, pts, feat_t, conf_t, feat_s)
            terms["ba"] = huber_cost(res, 0.1)
            total += weights.ba * terms["ba"]
        except AllPointsInvalid:
            skipped.append("ba")

    if weights.flow > 0 and flow_provider is not None and neighbors:
        s, (I_s, depth_s, pose_s) = next(iter(neighbors.items()))
        try:
            fl = flow_consistency_loss(depth_t, depth_s, pose_t, pose_s, K,
                                       flow_provider, frame_id, s)
            terms["flow"] = fl.loss
            total += weights.flow * fl.loss
            grad_d += weights.flow * fl.grad_log_depth_a
            grad_twists[s] = (grad_twists.get(s, np.zeros(6))
                              + weights.flow * fl.grad_twist_ab)
        except ProviderUnavailable:
            skipped.append("flow")

    return JointLossResult(total, terms, grad_d, grad_twists, skipped)


# ---------------------------------------------------------------------------
# pipeline state
# ---------------------------------------------------------------------------

@dataclass
class PipelineState:
    K: Intrinsics
    config: ScheduleConfig
    weights: LossWeights
    poses: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)
    depth_fields: dict = field(default_factory=dict)
    fields: FieldSet = field(default_factory=FieldSet)
    bootstrapped: bool = False
    seed: int = 0
    loss_rows: list = field(default_factory=list)   # (window, phase, iter, loss)
    ba_trace: list = field(default_factory=list)    # (level, iter, cost, mu, accepted)
    flow_warnings: int = 0
    windows_done: int = 0
    shifts: int = 0

    def trajectory(self):
        return Trajectory(np.asarray(self.timestamps), list(self.poses))

    def snapshot(self):
        return {
            "poses": [p.copy() for p in self.poses],
            "timestamps": list(self.timestamps),
            "depths": {k: v.copy() for k, v in self.depth_fields.items()},
            "field_params": [{k: v.copy() for k, v in f.parameters().items()}
                             for f in self.fields.fields],
            "n_fields": len(self.fields.fields),
            "rows": len(self.loss_rows),
            "ba_rows": len(self.ba_trace),
        }

    def restore(self, snap):
        self.poses = snap["poses"]
        self.timestamps = snap["timestamps"]
        self.depth_fields = snap["depths"]
        del self.fields.fields[snap["n_fields"]:]
        self.fields.next_id = snap["n_fields"]
        for f, params in zip(self.fields.fields, snap["field_params"]):
            for k, v in params.items():
                f.parameters()[k][...] = v
        del self.loss_rows[snap["rows"]:]
        del self.ba_trace[snap["ba_rows"]:]


def _frame_rays(image: Raster, depth: DepthField, pose: Pose, K: Intrinsics,
                n_rays, rng):
    h, w = depth.shape
    idx = rng.choice(h * w, size=min(n_rays, h * w), replace=False)
    vs, us = np.divmod(idx, w)
    d_cam = np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy,
                      np.ones(len(us))], axis=-1)
    dirs = d_cam @ pose.rotation.as_matrix().T
    origins = np.tile(pose.translation, (len(us), 1))
    rgb = np.asarray(image.data, dtype=float)[vs, us]
    # expected depth is along the normalized ray; targets are z-depths
    t_depth = depth.depth[vs, us] * np.linalg.norm(d_cam, axis=1)
    t_depth = np.where(depth.valid[vs, us], t_depth, np.nan)
    return RayBatch(origins, dirs, rgb, t_depth)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

def bootstrap(images, state: PipelineState, depth_init=None, pose_init=None,
              timestamps=None, ba_config: BAConfig = None,
              train_cfg: TrainConfig = None):
    """Joint initialization over the first `bootstrap_frames` frames.

    Frame 0 is the gauge and stays the identity bit-exactly. Depth fields
    start from `depth_init` (or a constant prior), poses from `pose_init`
    (or pairwise feature-metric alignment), and the first local field is
    spawned and trained.
    """
    cfg = state.config
    B = cfg.bootstrap_frames
    if len(images) < B:
        raise InsufficientFrames(f"need {B} frames, have {len(images)}")
    images = images[:B]
    state.timestamps = list(timestamps[:B]) if timestamps is not None \
        else [0.1 * i for i in range(B)]
    ba_config = ba_config or BAConfig()

    h, w = images[0].data.shape[:2]
    for i in range(B):
        if depth_init is not None:
            state.depth_fields[i] = depth_init[i].copy()
        else:
            state.depth_fields[i] = DepthField(np.full((h, w), np.log(3.0)), i)

    state.poses = [Pose.identity()]
    for i in range(1, B):
        if pose_init is not None:
            state.poses.append(pose_init[i].copy())
            continue
        res = coarse_to_fine_ba(images[i - 1], images[i], state.K,
                                Pose.identity(), state.depth_fields[i - 1],
                                config=ba_config)
        state.poses.append(state.poses[i - 1].compose(res.pose.inverse()))

    # depth warm-up over frames 1..B-1 (frame 0 pose is the untouched gauge)
    for it in range(cfg.depth_warmup_iters):
        total = _depth_sweep(images, range(B), state)
        state.loss_rows.append((-1, "depth", it, total))

    # pose refine, frame 0 excluded
    _fba_phase(images, range(1, B), state, cfg.fba_iters, window_id=-1,
               ba_config=ba_config)

    # first local field, anchored at the gauge origin
    anchor = Pose(translation=-state.poses[0].translation)
    state.fields.spawn(anchor, seed=state.seed, radius=cfg.field_radius)
    _radiance_phase(images, range(B), state, cfg.radiance_iters, window_id=-1,
                    train_cfg=train_cfg)

    state.bootstrapped = True
    assert np.array_equal(state.poses[0].rotation.q, [1.0, 0.0, 0.0, 0.0])
    assert not state.poses[0].translation.any()
    return state


# ---------------------------------------------------------------------------
# window phases
# ---------------------------------------------------------------------------

def _neighbors_of(i, frame_ids, images, state):
    out = {}
    for j in (i - 1, i + 1):
        if j in frame_ids and j < len(images):
            out[j] = (images[j], state.poses[i].inverse()
                      .compose(state.poses[j]).inverse())
    return out


def _depth_sweep(images, frame_ids, state: PipelineState):
    """One gradient-descent pass of the depth objective over the frames;
    poses are read-only here."""
    cfg, total = state.config, 0.0
    for i in frame_ids:
        nb = {}
        for j in (i - 1, i + 1):
            if 0 <= j < len(images) and j in state.depth_fields:
                # T_{i->j} for the warp
                nb[j] = (images[j],
                         state.poses[j].inverse().compose(state.poses[i]))
        if not nb:
            continue
        df = state.depth_fields[i]
        dl = depth_loss(images[i], df, nb, state.K, state.weights)
        df.log_depth -= cfg.depth_lr * dl.grad_log_depth
        df.clamp()
        total += dl.loss
    return total


def _fba_phase(images, frame_ids, state: PipelineState, iters, window_id,
               ba_config: BAConfig = None):
    """Iterative pose refinement; radiance parameters are never touched."""
    ba_config = ba_config or BAConfig()
    provider = AnalyticFeatureProvider(levels=ba_config.levels)
    frame_ids = [i for i in frame_ids if i >= 1]
    if not frame_ids:
        return
    feats = {}

    def get_feats(i):
        if i not in feats:
            feats[i] = provider.features(images[i])
        return feats[i]

    ba_states = {}
    prev_level = None
    for it in range(iters):
        # one iteration = one damped step per frame in the window; the trace
        # logs a single row (the summed robust cost) per iteration
        total = 0.0
        # early iterations act on the coarser levels, later ones on finer
        level = max(0, ba_config.levels - 1 - it * ba_config.levels // max(iters, 1))
        if level != prev_level:
            for i in list(ba_states):
                ba_states[i] = replace(ba_states[i], mu=ba_config.mu0)
            prev_level = level
        for i in frame_ids:
            feat_a, conf_a = get_feats(i - 1)
            feat_b, _ = get_feats(i)
            pts = grid_points(state.depth_fields[i - 1], ba_config.grid)
            if i not in ba_states:
                T_ab = state.poses[i].inverse().compose(state.poses[i - 1])
                ba_states[i] = BAState(T_ab, mu=ba_config.mu0)

            def residual_fn(st, level=level, pts=pts, fa=feat_a, ca=conf_a,
                            fb=feat_b):
                r, J, _ = ba_residuals(level, st.pose, state.K, pts, fa, ca, fb)
                return r, J

            try:
                ba_states[i], rep = lm_step(residual_fn, ba_states[i],
                                            gamma=ba_config.gamma)
                total += rep.cost_after
                state.ba_trace.append((level, it, rep.cost_after,
                                       rep.mu_after, rep.accepted))
                if rep.accepted:
                    state.poses[i] = state.poses[i - 1].compose(
                        ba_states[i].pose.inverse())
            except (AllPointsInvalid, SolveFailed):
                total = float("nan")
        state.loss_rows.append((window_id, "fba", it, total))


def _radiance_phase(images, frame_ids, state: PipelineState, iters, window_id,
                    train_cfg: TrainConfig = None):
    """Fine-tune the active field on rays from the window frames; poses and
    depth move only through the joint-loss terms (disabled at zero lambda)."""
    cfg = state.config
    tc = train_cfg or TrainConfig(far=3.0 * cfg.field_radius, n_samples=48)
    frame_ids = list(frame_ids)
    rng = np.random.default_rng(state.seed * 7919 + 13 + state.windows_done)
    for it in range(iters):
        i = frame_ids[it % len(frame_ids)]
        batch = _frame_rays(images[i], state.depth_fields[i], state.poses[i],
                            state.K, cfg.rays_per_iter, rng)
        keep = ~np.isnan(batch.target_depth)
        batch = RayBatch(batch.origins[keep], batch.dirs[keep],
                         batch.target_rgb[keep], batch.target_depth[keep])
        if len(batch.origins) == 0:
            state.loss_rows.append((window_id, "radiance", it, float("nan")))
            continue
        rep = field_train_step(state.fields.active, batch, tc,
                               seed=int(rng.integers(1 << 31)))
        state.loss_rows.append((window_id, "radiance", it, rep["total"]))


def process_window(images, state: PipelineState, frame_ids, depth_init=None,
                   timestamps=None, ba_config: BAConfig = None,
                   train_cfg: TrainConfig = None):
    """One window: constant-velocity pose init for the new frames, then the
    depth / pose / radiance phases with exact iteration budgets, then the
    shift check. Transactional: failure restores the previous state."""
    if not state.bootstrapped:
        raise InsufficientFrames("bootstrap must run before windows")
    cfg = state.config
    frame_ids = list(frame_ids)
    snap = state.snapshot()
    try:
        vel = Pose.identity()
        if len(state.poses) >= 2:
            vel = state.poses[-2].inverse().compose(state.poses[-1])
        h, w = images[0].data.shape[:2]
        for i in frame_ids:
            while len(state.poses) <= i:
                state.poses.append(state.poses[-1].compose(vel))
                state.timestamps.append(
                    timestamps[len(state.timestamps)]
                    if timestamps is not None
                    else state.timestamps[-1] + 0.1)
            if i not in state.depth_fields:
                state.depth_fields[i] = (
                    depth_init[i].copy() if depth_init is not None
                    else DepthField(np.full((h, w), np.log(3.0)), i))

        # trailing anchors from the previous window stay optimizable
        first = min(frame_ids)
        anchors = [i for i in range(first - cfg.anchor_frames, first)
                   if i in state.depth_fields]
        active = anchors + frame_ids

        wid = state.windows_done
        for it in range(cfg.depth_warmup_iters):
            total = _depth_sweep(images, active, state)
            state.loss_rows.append((wid, "depth", it, total))
        _fba_phase(images, active, state, cfg.fba_iters, wid, ba_config)
        _radiance_phase(images, active, state, cfg.radiance_iters, wid,
                        train_cfg)

        hit, frac = should_shift(state.fields.active,
                                 [state.poses[i] for i in frame_ids],
                                 state.K, threshold=cfg.shift_fraction,
                                 far=2.0 * cfg.field_radius)
        if hit:
            last = state.poses[max(frame_ids)]
            shift_field(state.fields, Pose(translation=-last.translation),
                        frame_ids, radius=cfg.field_radius)
            state.shifts += 1
        state.windows_done += 1
    except Exception:
        state.restore(snap)
        raise
    return state


# ---------------------------------------------------------------------------
# full runs and serialization
# ---------------------------------------------------------------------------

def run_pipeline(dataset, config: ScheduleConfig = None,
                 weights: LossWeights = None, seed=0, depth_sigma=0.05,
                 ba_config: BAConfig = None, train_cfg: TrainConfig = None,
                 oracle_pose_init=False, pose_init=None) -> PipelineState:
    """Reconstruct a full dataset: bootstrap, then fixed-size windows.

    Depth initializes from the dataset's depth channel through the noisy
    stand-in provider (sigma = depth_sigma). Deterministic for a fixed seed.
    """
    config = config or ScheduleConfig()
    weights = weights or LossWeights()
    rng = np.random.default_rng(seed)
    z_far = 8.0 * config.field_radius
    depth_init = [noisy_depth_provider(d, rng, depth_sigma, i, z_far=z_far)
                  for i, d in enumerate(dataset.depths)]
    if pose_init is None and oracle_pose_init:
        pose_init = list(dataset.gt_trajectory.poses)
    if pose_init is not None:
        # re-express in the frame-0 gauge
        g = pose_init[0].inverse()
        pose_init = [g.compose(p) for p in pose_init]
    state = PipelineState(dataset.K, config, weights, seed=seed)
    ts = list(dataset.gt_trajectory.timestamps)
    bootstrap(dataset.colors, state, depth_init, pose_init, ts, ba_config,
              train_cfg)
    i = config.bootstrap_frames
    while i < len(dataset):
        ids = list(range(i, min(i + config.window, len(dataset))))
        try:
            process_window(dataset.colors, state, ids, depth_init, ts,
                           ba_config, train_cfg)
        except Exception as e:
            e.window_id = state.windows_done
            raise
        i += config.window
    return state


def write_losses_csv(path, state: PipelineState):
    with open(path, "w", newline="") as f:
        wtr = csv.writer(f)
        wtr.writerow(["window", "phase", "iter", "loss"])
        wtr.writerows(state.loss_rows)


def write_run_config(path, config: ScheduleConfig, weights: LossWeights,
                     provider="oracle", seed=0, extra=None):
    doc = {"schedule": config.to_dict(), "weights": dict(weights.__dict__),
           "flow_provider": provider, "seed": seed}
    if extra:
        doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    return doc


def read_run_config(path):
    with open(path) as f:
        doc = json.load(f)
    return (ScheduleConfig(**doc["schedule"]), LossWeights(**doc["weights"]),
            doc.get("flow_provider", "oracle"), doc.get("seed", 0))
