"""SO(3) primitives on 3x3 matrices.

All functions broadcast over leading axes: vectors are ``(..., 3)`` and
matrices ``(..., 3, 3)``.  Coefficients switch to Taylor expansions below
``SMALL_ANGLE`` to avoid cancellation.
"""

import math

import numpy as np

from .errors import NearSingular, NotSkew

SMALL_ANGLE = 1e-4
SKEW_TOL = 1e-9
# J_r^{-1} blows up at 2*pi; stay this far away from it.
SINGULAR_MARGIN = 1e-3
# log_so3 switches to axis extraction this close to pi.
_NEAR_PI = 1e-2
# Cutoff for the derivative coefficient of J_r^{-1}, which cancels like theta^-4.
_DCOEF_SMALL = 1e-1


def _vec(v):
    v = np.asarray(v, dtype=float)
    if v.shape[-1:] != (3,):
        raise ValueError(f"expected trailing dimension 3, got shape {v.shape}")
    return v


def _mat(m):
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3):
        raise ValueError(f"expected trailing dimensions (3, 3), got shape {m.shape}")
    return m


def hat(v):
    """Skew-symmetric matrix with ``hat(v) @ w == cross(v, w)``."""
    v = _vec(v)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    return np.stack(
        [
            np.stack([o, -z, y], axis=-1),
            np.stack([z, o, -x], axis=-1),
            np.stack([-y, x, o], axis=-1),
        ],
        axis=-2,
    )


def vee(m, tol=SKEW_TOL):
    """Inverse of :func:`hat`.

    Raises ``NotSkew`` when ``m + m.T`` exceeds ``tol`` (scaled by the
    magnitude of ``m`` when that is larger than one).
    """
    m = _mat(m)
    sym = m + np.swapaxes(m, -1, -2)
    scale = np.maximum(1.0, np.max(np.abs(m), axis=(-2, -1)))
    resid = np.max(np.abs(sym), axis=(-2, -1)) / scale
    if np.any(resid > tol):
        raise NotSkew(f"symmetry residual {np.max(resid):.3e} exceeds {tol:g}")
    return _vee_unchecked(m)


def _vee_unchecked(m):
    return 0.5 * np.stack(
        [m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]],
        axis=-1,
    )


def _angle(v):
    return np.linalg.norm(v, axis=-1)


def _coefs_exp(theta):
    """sin(t)/t and (1-cos t)/t^2."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    half = np.sin(0.5 * t) / t
    b = np.where(small, 0.5 - t2 / 24.0, 2.0 * half * half)
    return a, b


def _coef_c(theta):
    """(t - sin t)/t^3."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    return np.where(small, 1.0 / 6.0 - theta * theta / 120.0, (t - np.sin(t)) / t**3)


def _coef_d(theta):
    """1/t^2 - (1 + cos t)/(2 t sin t), written with cot(t/2) to stay finite at pi."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    closed = 1.0 / (t * t) - 1.0 / (2.0 * t * np.tan(0.5 * t))
    return np.where(small, 1.0 / 12.0 + theta * theta / 720.0, closed)


def _coef_d_prime_over_t(theta):
    """d/dt of :func:`_coef_d`, divided by t."""
    small = theta < _DCOEF_SMALL
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    s = np.sin(0.5 * t)
    closed = (-2.0 / t**3 + 1.0 / (2.0 * t * t * np.tan(0.5 * t)) + 1.0 / (4.0 * t * s * s)) / t
    series = 1.0 / 360.0 + t2 / 7560.0 + t2 * t2 / 201600.0
    return np.where(small, series, closed)


def exp_so3(v):
    """Rodrigues' formula."""
    v = _vec(v)
    if v.ndim == 1:
        return _exp_single(v)
    a, b = _coefs_exp(_angle(v))
    k = hat(v)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def log_so3(r):
    """Principal logarithm, ``|result|`` in ``[0, pi]``."""
    r = _mat(r)
    lead = r.shape[:-2]
    r = r.reshape(-1, 3, 3)
    w = _vee_unchecked(r)  # sin(theta) * axis
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(r, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)

    small = theta < SMALL_ANGLE
    near_pi = theta > np.pi - _NEAR_PI
    safe_s = np.where(small | near_pi, 1.0, s)
    scale = np.where(small, 1.0 + theta * theta / 6.0, theta / safe_s)
    out = scale[..., None] * w

    if np.any(near_pi):
        out[near_pi] = _log_near_pi(r[near_pi], w[near_pi], theta[near_pi], c[near_pi])
    return out.reshape(lead + (3,))


def _log_near_pi(r, w, theta, c):
    # (R + R^T)/2 - cos(t) I = (1 - cos t) a a^T
    sym = 0.5 * (r + np.swapaxes(r, -1, -2)) - c[..., None, None] * np.eye(3)
    diag = np.diagonal(sym, axis1=-2, axis2=-1)
    i = np.argmax(diag, axis=-1)
    col = np.take_along_axis(sym, i[..., None, None], axis=-1)[..., 0]
    axis = col / np.linalg.norm(col, axis=-1, keepdims=True)
    sign = np.where(np.sum(axis * w, axis=-1) < 0.0, -1.0, 1.0)
    return (sign * theta)[..., None] * axis


def _exp_single(v):
    x, y, z = float(v[0]), float(v[1]), float(v[2])
    t2 = x * x + y * y + z * z
    t = math.sqrt(t2)
    if t < SMALL_ANGLE:
        a, b = 1.0 - t2 / 6.0, 0.5 - t2 / 24.0
    else:
        a = math.sin(t) / t
        h = math.sin(0.5 * t) / t
        b = 2.0 * h * h
    xx, yy, zz, xy, xz, yz = x * x, y * y, z * z, x * y, x * z, y * z
    return np.array(
        [
            [1.0 - b * (yy + zz), b * xy - a * z, b * xz + a * y],
            [b * xy + a * z, 1.0 - b * (xx + zz), b * yz - a * x],
            [b * xz - a * y, b * yz + a * x, 1.0 - b * (xx + yy)],
        ]
    )


def _jr_inv_apply_single(xi, w):
    x, y, z = float(xi[0]), float(xi[1]), float(xi[2])
    p, q, r = float(w[0]), float(w[1]), float(w[2])
    t2 = x * x + y * y + z * z
    t = math.sqrt(t2)
    if t >= 2.0 * math.pi - SINGULAR_MARGIN:
        _check_singular(np.array(t))
    if t < SMALL_ANGLE:
        d = 1.0 / 12.0 + t2 / 720.0
    else:
        d = 1.0 / t2 - 1.0 / (2.0 * t * math.tan(0.5 * t))
    cx, cy, cz = y * r - z * q, z * p - x * r, x * q - y * p
    ccx, ccy, ccz = y * cz - z * cy, z * cx - x * cz, x * cy - y * cx
    return np.array([p + 0.5 * cx + d * ccx, q + 0.5 * cy + d * ccy, r + 0.5 * cz + d * ccz])


def right_jacobian(v):
    v = _vec(v)
    theta = _angle(v)
    _, b = _coefs_exp(theta)
    c = _coef_c(theta)
    k = hat(v)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye - b[..., None, None] * k + c[..., None, None] * (k @ k)


def _check_singular(theta):
    limit = 2.0 * np.pi - SINGULAR_MARGIN
    if np.any(theta >= limit):
        raise NearSingular(f"|xi| = {np.max(theta):.6f} reached the J_r^-1 singularity margin ({limit:.6f})")


def right_jacobian_inv(v):
    v = _vec(v)
    theta = _angle(v)
    _check_singular(theta)
    d = _coef_d(theta)
    k = hat(v)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + 0.5 * k + d[..., None, None] * (k @ k)


# Matrix-free products used inside the solvers and their reverse passes.


def jr_inv_apply(xi, w):
    """``right_jacobian_inv(xi) @ w`` without forming the matrix."""
    if np.ndim(xi) == 1 and np.ndim(w) == 1:
        return _jr_inv_apply_single(xi, w)
    theta = _angle(xi)
    _check_singular(theta)
    d = _coef_d(theta)[..., None]
    xw = np.cross(xi, w)
    return w + 0.5 * xw + d * np.cross(xi, xw)


def jr_inv_t_apply(xi, g):
    """``right_jacobian_inv(xi).T @ g``."""
    d = _coef_d(_angle(xi))[..., None]
    xg = np.cross(xi, g)
    return g - 0.5 * xg + d * np.cross(xi, xg)


def jr_t_apply(xi, g):
    """``right_jacobian(xi).T @ g``."""
    theta = _angle(xi)
    _, b = _coefs_exp(theta)
    c = _coef_c(theta)
    xg = np.cross(xi, g)
    return g + b[..., None] * xg + c[..., None] * np.cross(xi, xg)


def jr_inv_apply_vjp_xi(xi, w, g):
    """``(d/dxi [right_jacobian_inv(xi) @ w]).T @ g``."""
    theta = _angle(xi)
    d = _coef_d(theta)[..., None]
    dp = _coef_d_prime_over_t(theta)[..., None]
    xw = np.cross(xi, w)
    xxw = np.cross(xi, xw)
    xi_w = np.sum(xi * w, axis=-1, keepdims=True)
    xi_g = np.sum(xi * g, axis=-1, keepdims=True)
    w_g = np.sum(w * g, axis=-1, keepdims=True)
    xxw_g = np.sum(xxw * g, axis=-1, keepdims=True)
    return 0.5 * np.cross(w, g) + d * (xi_w * g + w * xi_g - 2.0 * xi * w_g) + dp * xxw_g * xi


def orthogonality_residual(r):
    """Frobenius norm of ``R^T R - I``."""
    r = _mat(r)
    return np.linalg.norm(np.swapaxes(r, -1, -2) @ r - np.eye(3), axis=(-2, -1))


def geodesic_distance(r1, r2):
    """Angle of ``r1^T r2`` in radians."""
    return _angle(log_so3(np.swapaxes(_mat(r1), -1, -2) @ _mat(r2)))
