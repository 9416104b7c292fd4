"""SE(3)/SO(3) machinery, pinhole camera, differentiable warping, scene contraction.

Conventions fixed once, used everywhere:
  * quaternions are (w, x, y, z), kept unit-norm
  * twists are 6-vectors (v, omega): translation part first
  * pose updates are left-multiplicative: T <- exp(xi) * T
  * pixel (u, v) at integer coordinates is the *center* of texel (u, v)
  * depth rasters store z-depth (camera-frame z), not ray length
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi, BehindCamera, NonPositiveDepth

_SMALL_ANGLE = 1e-8


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    # Shepperd's method: pick the largest diagonal combination for stability.
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def skew(w):
    return np.array([[0, -w[2], w[1]],
                     [w[2], 0, -w[0]],
                     [-w[1], w[0], 0]], dtype=float)


class Rotation:
    """Unit quaternion wrapper; renormalized after every operation."""

    __slots__ = ("q",)

    def __init__(self, q):
        q = np.asarray(q, dtype=float)
        n = np.linalg.norm(q)
        if n == 0:
            raise ValueError("zero quaternion")
        self.q = q / n

    @staticmethod
    def identity():
        return Rotation(np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_matrix(R):
        return Rotation(matrix_to_quat(np.asarray(R, dtype=float)))

    @staticmethod
    def from_axis_angle(axis, angle):
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0:
            return Rotation.identity()
        axis = axis / n
        half = 0.5 * angle
        return Rotation(np.concatenate([[np.cos(half)], np.sin(half) * axis]))

    @staticmethod
    def exp(omega):
        omega = np.asarray(omega, dtype=float)
        theta = np.linalg.norm(omega)
        if theta < _SMALL_ANGLE:
            return Rotation(np.concatenate([[1.0], 0.5 * omega]))
        return Rotation.from_axis_angle(omega, theta)

    def log(self):
        w = np.clip(abs(self.q[0]), 0.0, 1.0)
        vec = self.q[1:] if self.q[0] >= 0 else -self.q[1:]
        s = np.linalg.norm(vec)
        theta = 2.0 * np.arctan2(s, w)
        if theta > np.pi - 1e-6:
            raise AngleNearPi(f"rotation angle {theta} too close to pi")
        if s < _SMALL_ANGLE:
            return 2.0 * vec
        return theta * vec / s

    def as_matrix(self):
        return quat_to_matrix(self.q)

    def compose(self, other):
        return Rotation(quat_mul(self.q, other.q))

    def inverse(self):
        return Rotation(self.q * np.array([1.0, -1.0, -1.0, -1.0]))

    def apply(self, v):
        return np.asarray(v, dtype=float) @ self.as_matrix().T

    @property
    def angle(self):
        s = np.linalg.norm(self.q[1:])
        return 2.0 * np.arctan2(s, abs(self.q[0]))

    def __repr__(self):
        return f"Rotation(q={self.q})"


@dataclass
class Pose:
    """Rigid transform: X -> R X + t."""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @staticmethod
    def identity():
        return Pose()

    @staticmethod
    def from_matrix(M):
        M = np.asarray(M, dtype=float)
        return Pose(Rotation.from_matrix(M[:3, :3]), M[:3, 3])

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation.as_matrix()
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply ``other`` first, then ``self``."""
        return Pose(self.rotation.compose(other.rotation),
                    self.rotation.apply(other.translation) + self.translation)

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def apply(self, X):
        return self.rotation.apply(X) + self.translation

    def copy(self):
        return Pose(Rotation(self.q_copy()), self.translation.copy())

    def q_copy(self):
        return self.rotation.q.copy()

    def __repr__(self):
        return f"Pose(q={self.rotation.q}, t={self.translation})"


# ---------------------------------------------------------------------------
# se(3) exp / log
# ---------------------------------------------------------------------------

def _so3_V(omega):
    """Left Jacobian of SO(3): integrates translation under rotation."""
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * W + (1.0 / 6.0) * (W @ W)
    t2 = theta * theta
    return (np.eye(3)
            + ((1 - np.cos(theta)) / t2) * W
            + ((theta - np.sin(theta)) / (t2 * theta)) * (W @ W))


def _so3_V_inv(omega):
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * W + (1.0 / 12.0) * (W @ W)
    t2 = theta * theta
    coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / t2
    return np.eye(3) - 0.5 * W + coef * (W @ W)


def se3_exp(xi) -> Pose:
    """Exponential map of a twist (v, omega) -> Pose."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    v, omega = xi[:3], xi[3:]
    return Pose(Rotation.exp(omega), _so3_V(omega) @ v)


def se3_log(p: Pose) -> np.ndarray:
    """Principal-branch inverse of se3_exp; raises AngleNearPi near the cut."""
    omega = p.rotation.log()
    v = _so3_V_inv(omega) @ p.translation
    return np.concatenate([v, omega])


def adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint of a pose: exp(Adj_T xi) = T exp(xi) T^-1, twist = (v, w)."""
    R = p.rotation.as_matrix()
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[:3, 3:] = skew(p.translation) @ R
    A[3:, 3:] = R
    return A


# ---------------------------------------------------------------------------
# pinhole camera
# ---------------------------------------------------------------------------

@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def scaled(self, level: int) -> "Intrinsics":
        """Intrinsics of pyramid level `level` under the pixel-center convention.

        A fine coordinate f maps to coarse c = (f - (2^l - 1)/2) / 2^l.
        """
        s = 2 ** level
        off = (s - 1) / 2.0
        return Intrinsics(self.fx / s, self.fy / s,
                          (self.cx - off) / s, (self.cy - off) / s,
                          -(-self.width // s), -(-self.height // s))

    def as_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_dict(d):
        return Intrinsics(d["fx"], d["fy"], d["cx"], d["cy"],
                          d["width"], d["height"])


def project(K: Intrinsics, X, z_min: float = 1e-4, with_jacobian: bool = False):
    """Project one camera-frame point to a pixel; optional 2x3 Jacobian."""
    X = np.asarray(X, dtype=float).reshape(3)
    x, y, z = X
    if z <= z_min:
        raise BehindCamera(f"z={z} <= z_min={z_min}")
    uv = np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])
    if not with_jacobian:
        return uv
    J = np.array([[K.fx / z, 0.0, -K.fx * x / (z * z)],
                  [0.0, K.fy / z, -K.fy * y / (z * z)]])
    return uv, J


def unproject(K: Intrinsics, pixel, depth: float):
    """Lift a pixel at z-depth `depth` into the camera frame."""
    if depth <= 0:
        raise NonPositiveDepth(f"depth={depth}")
    u, v = np.asarray(pixel, dtype=float).reshape(2)
    return np.array([(u - K.cx) / K.fx * depth,
                     (v - K.cy) / K.fy * depth,
                     depth])


@dataclass
class WarpJacobians:
    """Derivatives of (pixel_b, depth_b) w.r.t. twist of T_ab, depth_a, (fx, fy)."""

    pix_twist: np.ndarray   # (N, 2, 6)
    pix_depth: np.ndarray   # (N, 2)
    pix_f: np.ndarray       # (N, 2, 2)
    depth_twist: np.ndarray  # (N, 6)
    depth_depth: np.ndarray  # (N,)
    depth_f: np.ndarray     # (N, 2)


def warp_points(T_ab: Pose, K: Intrinsics, pixels, depths,
                z_min: float = 1e-4, with_jacobian: bool = False):
    """Unproject pixels of frame a, transform by T_ab, project into frame b.

    Vectorized over N points; invalid (behind-camera) points are flagged in the
    returned mask rather than raised. Jacobians use the left-multiplicative
    twist convention T <- exp(xi) T_ab.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    depths = np.asarray(depths, dtype=float).reshape(-1)
    u, v = pixels[:, 0], pixels[:, 1]
    # direction through pixel at unit depth
    dx = (u - K.cx) / K.fx
    dy = (v - K.cy) / K.fy
    Xa = np.stack([dx * depths, dy * depths, depths], axis=-1)
    R = T_ab.rotation.as_matrix()
    Xb = Xa @ R.T + T_ab.translation
    xb, yb, zb = Xb[:, 0], Xb[:, 1], Xb[:, 2]
    valid = (depths > 0) & (zb > z_min)
    zs = np.where(valid, zb, 1.0)  # safe divisor
    pix_b = np.stack([K.fx * xb / zs + K.cx, K.fy * yb / zs + K.cy], axis=-1)
    if (np.array_equal(T_ab.rotation.q, Rotation.identity().q)
            and not T_ab.translation.any()):
        # identity transform maps pixels to themselves bit-exactly; the
        # generic path loses an ulp in unproject -> project roundtrips
        pix_b = pixels.copy()
        zb = depths.copy()
    if not with_jacobian:
        return pix_b, zb, valid

    n = pixels.shape[0]
    # d pixel_b / d X_b
    Jpi = np.zeros((n, 2, 3))
    Jpi[:, 0, 0] = K.fx / zs
    Jpi[:, 0, 2] = -K.fx * xb / (zs * zs)
    Jpi[:, 1, 1] = K.fy / zs
    Jpi[:, 1, 2] = -K.fy * yb / (zs * zs)

    # d X_b / d twist = [I | -[X_b]x]  (left perturbation)
    Jx_twist = np.zeros((n, 3, 6))
    Jx_twist[:, 0, 0] = Jx_twist[:, 1, 1] = Jx_twist[:, 2, 2] = 1.0
    Jx_twist[:, 0, 4] = zb
    Jx_twist[:, 0, 5] = -yb
    Jx_twist[:, 1, 3] = -zb
    Jx_twist[:, 1, 5] = xb
    Jx_twist[:, 2, 3] = yb
    Jx_twist[:, 2, 4] = -xb

    # d X_b / d depth_a = R @ (dx, dy, 1)
    dXb_dd = np.stack([dx, dy, np.ones(n)], axis=-1) @ R.T  # (N, 3)

    # d X_a / d fx = (-(u-cx)/fx^2 * d, 0, 0);  similarly fy
    dXa_dfx = np.zeros((n, 3))
    dXa_dfx[:, 0] = -dx / K.fx * depths
    dXa_dfy = np.zeros((n, 3))
    dXa_dfy[:, 1] = -dy / K.fy * depths
    dXb_dfx = dXa_dfx @ R.T
    dXb_dfy = dXa_dfy @ R.T

    pix_twist = np.einsum("nij,njk->nik", Jpi, Jx_twist)
    pix_depth = np.einsum("nij,nj->ni", Jpi, dXb_dd)
    # projection itself also depends on (fx, fy): u = fx*x/z + cx
    pix_f = np.zeros((n, 2, 2))
    pix_f[:, 0, 0] = xb / zs
    pix_f[:, 1, 1] = yb / zs
    pix_f[:, :, 0] += np.einsum("nij,nj->ni", Jpi, dXb_dfx)
    pix_f[:, :, 1] += np.einsum("nij,nj->ni", Jpi, dXb_dfy)

    jac = WarpJacobians(
        pix_twist=pix_twist,
        pix_depth=pix_depth,
        pix_f=pix_f,
        depth_twist=Jx_twist[:, 2, :],
        depth_depth=dXb_dd[:, 2],
        depth_f=np.stack([dXb_dfx[:, 2], dXb_dfy[:, 2]], axis=-1),
    )
    return pix_b, zb, valid, jac


def warp_point(T_ab: Pose, K: Intrinsics, pixel_a, depth_a: float,
               z_min: float = 1e-4, with_jacobian: bool = False):
    """Scalar warp; raises BehindCamera / NonPositiveDepth on invalid input."""
    if depth_a <= 0:
        raise NonPositiveDepth(f"depth={depth_a}")
    out = warp_points(T_ab, K, [pixel_a], [depth_a], z_min=z_min,
                      with_jacobian=with_jacobian)
    if with_jacobian:
        pix_b, depth_b, valid, jac = out
    else:
        pix_b, depth_b, valid = out
    if not valid[0]:
        raise BehindCamera("warped point behind camera")
    if with_jacobian:
        return pix_b[0], depth_b[0], jac
    return pix_b[0], depth_b[0]


# ---------------------------------------------------------------------------
# scene contraction
# ---------------------------------------------------------------------------

def contract(x):
    """Map R^3 into the open ball of radius 2: identity inside the unit ball,
    (2 - 1/|x|) * x/|x| outside."""
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.maximum(n, 1e-30)
    out = np.where(n <= 1.0, x, (2.0 - 1.0 / safe) * x / safe)
    return out


def outside_contracted_cube(x):
    """True iff |contract(x)|_inf > 1 (strict)."""
    c = contract(x)
    return np.max(np.abs(c), axis=-1) > 1.0


# ---------------------------------------------------------------------------
# trajectories and TUM serialization
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Time-stamped pose sequence; timestamps strictly increasing."""

    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.poses) != len(self.timestamps):
            raise ValueError("timestamp/pose count mismatch")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def positions(self):
        return np.stack([p.translation for p in self.poses])


def save_tum(path, traj: Trajectory):
    """TUM line format: `timestamp tx ty tz qx qy qz qw`, 17 significant digits."""
    with open(path, "w") as f:
        for ts, p in zip(traj.timestamps, traj.poses):
            t = p.translation
            w, x, y, z = p.rotation.q
            f.write(f"{ts:.17g} {t[0]:.17g} {t[1]:.17g} {t[2]:.17g} "
                    f"{x:.17g} {y:.17g} {z:.17g} {w:.17g}\n")


def load_tum(path) -> Trajectory:
    timestamps, poses = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(s) for s in line.split()]
            if len(vals) != 8:
                raise ValueError(f"bad TUM line: {line!r}")
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            timestamps.append(ts)
            poses.append(Pose(Rotation([qw, qx, qy, qz]), [tx, ty, tz]))
    return Trajectory(np.array(timestamps), poses)
