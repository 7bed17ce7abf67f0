"""SE(3) / se(3) kernel.

Twists are 6-vectors ordered ``(omega, v)``: rotation (axis-angle, radians)
first, translation second. The exponential of a twist acts on a point ``p``
as ``R p + V(omega) v``.

Every function named ``*_batch`` (or taking ``...`` shaped arrays) works on
arbitrary leading dimensions; the dataclass API (``Twist``,
``RigidTransform``) wraps single values for readability at call sites.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BranchAmbiguityError, ValidationError

SMALL_ANGLE = 1e-8
# log() refuses rotations this close to pi; the axis sign is ambiguous there.
PI_MARGIN = 1e-6
RENORM_EVERY = 1000


# ---------------------------------------------------------------------------
# so(3)
# ---------------------------------------------------------------------------

def hat(w):
    """Skew-symmetric matrix of ``w`` (shape ``(..., 3)`` -> ``(..., 3, 3)``)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _series_coeffs(theta):
    """Return ``sin(t)/t``, ``(1-cos t)/t^2`` and ``(t-sin t)/t^3``.

    Uses ``1 - cos t = 2 sin^2(t/2)`` to avoid cancellation and falls back to
    the second-order Taylor values below ``SMALL_ANGLE``.
    """
    theta = np.asarray(theta, dtype=float)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(t) / t)
    b = np.where(small, 0.5, 2.0 * np.sin(0.5 * t) ** 2 / (t * t))
    c = np.where(small, 1.0 / 6.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def so3_exp(w):
    """Rodrigues formula, batched."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _ = _series_coeffs(theta)
    K = hat(w)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * K2


def so3_left_jacobian(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    _, b, c = _series_coeffs(theta)
    K = hat(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + b[..., None, None] * K + c[..., None, None] * (K @ K)


def so3_log(R):
    """Principal-branch logarithm. Raises near a rotation angle of pi."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R, axis1=-2, axis2=-1)
    s = vee(R - np.swapaxes(R, -1, -2))  # 2 sin(theta) * axis
    sin_t = 0.5 * np.linalg.norm(s, axis=-1)
    cos_t = 0.5 * (tr - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if np.any(theta > np.pi - PI_MARGIN):
        raise BranchAmbiguityError(
            f"rotation angle {float(np.max(theta)):.9f} is within {PI_MARGIN} of pi"
        )
    small = theta < SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    scale = np.where(small, 0.5 + theta**2 / 12.0, ts / (2.0 * np.sin(ts)))
    return scale[..., None] * s


def so3_left_jacobian_inv(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    # (1/t^2) * (1 - t sin t / (2 (1 - cos t)))
    coef = np.where(
        small,
        1.0 / 12.0,
        (1.0 - t * np.sin(t) / (4.0 * np.sin(0.5 * t) ** 2)) / (t * t),
    )
    K = hat(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - 0.5 * K + coef[..., None, None] * (K @ K)


# ---------------------------------------------------------------------------
# se(3), batched
# ---------------------------------------------------------------------------

def se3_exp_batch(xi):
    """Exponential of twists ``(..., 6)``; returns ``(R (...,3,3), t (...,3))``."""
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ValidationError("twist contains non-finite entries")
    w, v = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    a, b, c = _series_coeffs(theta)
    K = hat(w)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + a[..., None, None] * K + b[..., None, None] * K2
    V = eye + b[..., None, None] * K + c[..., None, None] * K2
    t = np.einsum("...ij,...j->...i", V, v)
    return R, t


def se3_log_batch(R, t):
    w = so3_log(R)
    v = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(w), np.asarray(t, dtype=float))
    return np.concatenate([w, v], axis=-1)


def _q_coeffs(theta):
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    s, c = np.sin(t), np.cos(t)
    c1 = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - s) / t**3)
    c2 = np.where(small, 1.0 / 24.0 - theta**2 / 720.0, (t * t + 2.0 * c - 2.0) / (2.0 * t**4))
    c3 = np.where(small, 1.0 / 120.0 - theta**2 / 2520.0, (2.0 * t - 3.0 * s + t * c) / (2.0 * t**5))
    return c1, c2, c3


def se3_left_jacobian(xi):
    """6x6 left Jacobian in ``(omega, v)`` ordering.

    ``exp(xi + d) ~= exp(J d) exp(xi)`` for small ``d``; the block layout is
    ``[[J_l(w), 0], [Q(w, v), J_l(w)]]``.
    """
    xi = np.asarray(xi, dtype=float)
    w, v = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    Jl = so3_left_jacobian(w)
    W = hat(w)
    P = hat(v)
    c1, c2, c3 = (x[..., None, None] for x in _q_coeffs(theta))
    WP = W @ P
    PW = P @ W
    WPW = WP @ W
    Q = (
        0.5 * P
        + c1 * (WP + PW + WPW)
        + c2 * (W @ WP + PW @ W - 3.0 * WPW)
        + c3 * (WPW @ W + W @ WPW)
    )
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Jl
    out[..., 3:, 3:] = Jl
    out[..., 3:, :3] = Q
    return out


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z) -- used at I/O boundaries and for Gaussian
# orientations.
# ---------------------------------------------------------------------------

def quat_to_rotmat(q):
    """Rotation matrices from (not necessarily unit) quaternions ``(..., 4)``."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q, dR):
    """Gradient w.r.t. the raw quaternion given ``dL/dR``.

    Includes the normalisation step, so the result is orthogonal to ``q``.
    """
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    g = dR
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    gu = np.stack([gw, gx, gy, gz], axis=-1)
    gu = gu - np.sum(gu * u, axis=-1, keepdims=True) * u
    return gu / norm


def rotmat_to_quat(R):
    """Unit quaternion with non-negative w for each rotation matrix."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for k, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        q /= np.linalg.norm(q)
        out[k] = -q if q[0] < 0 else q
    return out.reshape(R.shape[:-2] + (4,))


def quat_multiply(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def orthonormalize(R):
    """Nearest rotation (polar projection via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.ones(U.shape[:-1])
    D[..., -1] = np.sign(np.linalg.det(U @ Vt))
    return (U * D[..., None, :]) @ Vt


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Twist:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, xi):
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    @property
    def vector(self):
        return np.concatenate([self.omega, self.v])

    def __mul__(self, scalar):
        return Twist(self.omega * scalar, self.v * scalar)

    __rmul__ = __mul__


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation acting as ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def is_valid(self, tol=1e-9):
        R = self.rotation
        return (
            np.all(np.isfinite(R))
            and np.all(np.isfinite(self.translation))
            and np.max(np.abs(R.T @ R - np.eye(3))) <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol
        )


def se3_exp(xi: Twist) -> RigidTransform:
    R, t = se3_exp_batch(xi.vector)
    return RigidTransform(R, t)


def se3_log(T: RigidTransform) -> Twist:
    if not T.is_valid(1e-6):
        raise ValidationError("se3_log requires an orthonormal rotation with det +1")
    return Twist.from_vector(se3_log_batch(T.rotation, T.translation))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a o b``: apply ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def compose_chain(transforms, renorm_every=RENORM_EVERY) -> RigidTransform:
    """Left-fold ``compose`` over ``transforms``, re-projecting onto SO(3)
    every ``renorm_every`` products to stop orthonormality drift."""
    acc = RigidTransform.identity()
    for k, T in enumerate(transforms, start=1):
        acc = compose(acc, T)
        if renorm_every and k % renorm_every == 0:
            acc = RigidTransform(orthonormalize(acc.rotation), acc.translation)
    return acc


# Unit translations along X/Y/Z, then unit rotations about X/Y/Z.
FIXED_GENERATORS: tuple = (
    Twist([0, 0, 0], [1, 0, 0]),
    Twist([0, 0, 0], [0, 1, 0]),
    Twist([0, 0, 0], [0, 0, 1]),
    Twist([1, 0, 0], [0, 0, 0]),
    Twist([0, 1, 0], [0, 0, 0]),
    Twist([0, 0, 1], [0, 0, 0]),
)
FIXED_GENERATOR_NAMES = ("tx", "ty", "tz", "rx", "ry", "rz")


def fixed_generator_matrix():
    """The six frozen generators as a read-only ``(6, 6)`` array of twists."""
    m = np.stack([g.vector for g in FIXED_GENERATORS])
    m.setflags(write=False)
    return m


def twist_to_matrix(xi):
    """4x4 se(3) matrix embedding of a twist."""
    xi = np.asarray(xi, dtype=float)
    m = np.zeros(xi.shape[:-1] + (4, 4))
    m[..., :3, :3] = hat(xi[..., :3])
    m[..., :3, 3] = xi[..., 3:]
    return m
