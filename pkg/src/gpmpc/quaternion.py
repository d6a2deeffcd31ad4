"""Hamilton quaternion helpers, scalar-first (w, x, y, z).

All functions broadcast over leading axes so the solver can evaluate a whole
horizon at once.
"""

import numpy as np


def quat_mul(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q):
    """Resolve the double cover by flipping to q_w >= 0."""
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_rotmat(q):
    """Matrix of v -> q v q_bar.

    Uses the homogeneous quadratic form, so for a non-unit q the result is
    |q|^2 times a rotation. RK4 stage points rely on this.
    """
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    ww, xx, yy, zz = w * w, x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    R = np.stack([
        ww + xx - yy - zz, 2.0 * (xy - wz), 2.0 * (xz + wy),
        2.0 * (xy + wz), ww - xx + yy - zz, 2.0 * (yz - wx),
        2.0 * (xz - wy), 2.0 * (yz + wx), ww - xx - yy + zz,
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def quat_rotate(q, v):
    """Rotate vector ``v`` by unit quaternion ``q`` (q v q_bar)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.einsum("...ij,...j->...i", quat_to_rotmat(q), v)


def quat_rotate_inverse(q, v):
    """Rotate ``v`` by the conjugate of ``q`` (world -> body for q_WB)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.einsum("...ji,...j->...i", quat_to_rotmat(q), v)


def left_matrix(q):
    """L(q) with q ⊗ p = L(q) p."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    M = np.stack([
        w, -x, -y, -z,
        x, w, -z, y,
        y, z, w, -x,
        z, -y, x, w,
    ], axis=-1)
    return M.reshape(q.shape[:-1] + (4, 4))


def right_matrix(q):
    """R(q) with p ⊗ q = R(q) p."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    M = np.stack([
        w, -x, -y, -z,
        x, w, z, -y,
        y, -z, w, x,
        z, y, -x, w,
    ], axis=-1)
    return M.reshape(q.shape[:-1] + (4, 4))


_CONJ = np.diag([1.0, -1.0, -1.0, -1.0])


def rotate_jacobian(q, v):
    """d(q v q_bar)/dq, shape (..., 3, 4), for arbitrary (non-unit) q."""
    v_hat = np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)
    J = right_matrix(quat_mul(v_hat, quat_conj(q))) + left_matrix(quat_mul(q, v_hat)) @ _CONJ
    return J[..., 1:, :]


def rotate_inverse_jacobian(q, v):
    """d(q_bar v q)/dq, shape (..., 3, 4)."""
    v_hat = np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)
    J = right_matrix(quat_mul(v_hat, q)) @ _CONJ + left_matrix(quat_mul(quat_conj(q), v_hat))
    return J[..., 1:, :]


def skew(v):
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    S = np.stack([o, -z, y, z, o, -x, -y, x, o], axis=-1)
    return S.reshape(v.shape[:-1] + (3, 3))


def attitude_error(q, q_ref):
    """Three-parameter error of q relative to q_ref: 2 vec(q_ref_bar ⊗ q), sign-canonical."""
    r = quat_canonical(quat_mul(quat_conj(q_ref), q))
    return 2.0 * r[..., 1:]


def attitude_retract(q, delta):
    """Inverse of :func:`attitude_error`: q ⊗ (sqrt(1 - |delta/2|^2), delta/2)."""
    half = 0.5 * np.asarray(delta, dtype=float)
    s2 = np.sum(half * half, axis=-1, keepdims=True)
    # past the chart boundary fall back to a normalized quaternion
    w = np.sqrt(np.clip(1.0 - s2, 0.0, None))
    dq = np.concatenate([w, half], axis=-1)
    dq = dq / np.linalg.norm(dq, axis=-1, keepdims=True)
    return quat_mul(q, dq)
