"""Fixed-step integrators.

Rotations are integrated in exponential coordinates around an anchor,
``R = anchor @ Exp(xi)`` with ``xi' = J_r^{-1}(xi) omega``.  When
``|xi|`` exceeds the chart threshold the anchor is moved to the current
rotation and ``xi`` is reset to zero.

The ``unroll_*`` functions run explicit Euler on a batch of independent
trajectories (leading axis ``B``) with controls already sampled on the
step grid, and keep a tape of every intermediate for the reverse pass in
:mod:`imudebias.trainer`.
"""

from dataclasses import dataclass, field

import numpy as np

from . import bias_net, so3
from .errors import BadTimeline, NonFinite

METHODS = ("euler", "rk4")
DEFAULT_THRESHOLD = np.pi


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        if t.ndim != 1 or t.size < 1:
            raise BadTimeline("time grid must be a non-empty 1-D array")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise BadTimeline("time grid must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, t0, t1, dt):
        n = int(round((t1 - t0) / dt))
        return cls(t0 + dt * np.arange(n + 1))

    @property
    def dt(self):
        """Nominal (median) step."""
        if self.times.size < 2:
            return 0.0
        return float(np.median(np.diff(self.times)))

    @property
    def steps(self):
        return np.diff(self.times)

    def __len__(self):
        return self.times.size


@dataclass
class ChartState:
    anchor: np.ndarray
    xi: np.ndarray

    @property
    def R(self):
        return self.anchor @ so3.exp_so3(self.xi)


@dataclass
class CoupledState:
    chart: ChartState
    b_g: np.ndarray
    v: np.ndarray
    p: np.ndarray
    b_a: np.ndarray

    @classmethod
    def from_pose(cls, R, v=(0.0, 0.0, 0.0), p=(0.0, 0.0, 0.0), b_g=(0.0, 0.0, 0.0), b_a=(0.0, 0.0, 0.0)):
        R = np.asarray(R, float)
        return cls(ChartState(R, np.zeros(R.shape[:-2] + (3,))), np.asarray(b_g, float), np.asarray(v, float),
                   np.asarray(p, float), np.asarray(b_a, float))


def _check_method(method):
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFinite("integration produced a non-finite state")


def integrate_euclidean(field_fn, x0, grid, method="rk4"):
    """Integrate ``x' = field_fn(t, x)`` on ``grid``; returns ``(len(grid), *x0.shape)``."""
    _check_method(method)
    x = np.array(x0, dtype=float)
    ts = grid.times
    path = np.empty((ts.size,) + x.shape)
    path[0] = x
    for k in range(ts.size - 1):
        t, h = ts[k], ts[k + 1] - ts[k]
        if method == "euler":
            x = x + h * np.asarray(field_fn(t, x))
        else:
            k1 = np.asarray(field_fn(t, x))
            k2 = np.asarray(field_fn(t + 0.5 * h, x + 0.5 * h * k1))
            k3 = np.asarray(field_fn(t + 0.5 * h, x + 0.5 * h * k2))
            k4 = np.asarray(field_fn(t + h, x + h * k3))
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(x)
        path[k + 1] = x
    return path


@dataclass
class RotationPath:
    R: np.ndarray
    xi: np.ndarray
    anchor_ids: np.ndarray
    anchors: list
    switches: int


def integrate_so3(omega_fn, R0, grid, method="rk4", threshold=DEFAULT_THRESHOLD):
    """Solve ``R' = R hat(omega(t))`` with chart switching."""
    _check_method(method)
    ts = grid.times
    anchor = np.array(R0, dtype=float)
    xi = np.zeros(3)
    n = ts.size
    R = np.empty((n, 3, 3))
    xis = np.empty((n, 3))
    ids = np.zeros(n, dtype=int)
    anchors = [anchor]
    R[0], xis[0] = anchor, xi
    for k in range(n - 1):
        t, h = ts[k], ts[k + 1] - ts[k]
        if method == "euler":
            xi = xi + h * so3.jr_inv_apply(xi, omega_fn(t))
        else:
            w0, wm, w1 = omega_fn(t), omega_fn(t + 0.5 * h), omega_fn(t + h)
            k1 = so3.jr_inv_apply(xi, w0)
            k2 = so3.jr_inv_apply(xi + 0.5 * h * k1, wm)
            k3 = so3.jr_inv_apply(xi + 0.5 * h * k2, wm)
            k4 = so3.jr_inv_apply(xi + h * k3, w1)
            xi = xi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(xi)
        R[k + 1] = anchor @ so3.exp_so3(xi)
        if np.linalg.norm(xi) > threshold:
            anchor = R[k + 1]
            anchors.append(anchor)
            xi = np.zeros(3)
        xis[k + 1] = xi
        ids[k + 1] = len(anchors) - 1
    return RotationPath(R, xis, ids, anchors, len(anchors) - 1)


# Coupled bias + pose systems


def _corrected(u, calib):
    if calib is None:
        return u
    return bias_net.linear_forward(calib, u)


def _call_field(fn, b, u, ud):
    if fn is None:
        return np.zeros_like(b), None
    if isinstance(fn, bias_net.MlpParams):
        return bias_net.forward_cached(fn, b, u, ud)
    return np.asarray(fn(b, u, ud), dtype=float), None


@dataclass
class Tape:
    """Per-step record of an unrolled Euler integration.

    Index ``k`` of the step lists refers to the step from ``t_k`` to
    ``t_{k+1}``; ``R`` has one more entry than the step lists.
    """

    dt: np.ndarray
    w: np.ndarray
    a: np.ndarray
    wd: np.ndarray
    ad: np.ndarray
    xi: list = field(default_factory=list)
    xi_pre: list = field(default_factory=list)
    b_g: list = field(default_factory=list)
    omega: list = field(default_factory=list)
    fg_cache: list = field(default_factory=list)
    anchor: list = field(default_factory=list)
    switched: list = field(default_factory=list)
    R: list = field(default_factory=list)
    v: list = field(default_factory=list)
    p: list = field(default_factory=list)
    b_a: list = field(default_factory=list)
    fa_cache: list = field(default_factory=list)
    switches: int = 0


def unroll_gyro_euler(f_g, U, D, dt, R0, b0_g, threshold=DEFAULT_THRESHOLD, calib_g=None, full=None):
    """Explicit Euler on the rotation/gyro-bias system for a batch.

    ``U``, ``D``: ``(B, N, 6)`` control values and rates at the step start
    times; ``dt``: ``(B, N)``.  When ``full`` is a dict with keys ``f_a``,
    ``v0``, ``p0``, ``b0_a``, ``gravity`` (and optionally ``calib_a``) the
    velocity/position/accel-bias states are integrated alongside.
    """
    U = np.asarray(U, float)
    D = np.asarray(D, float)
    dt = np.asarray(dt, float)
    B, N = dt.shape
    tape = Tape(dt=dt, w=U[..., :3], a=U[..., 3:], wd=D[..., :3], ad=D[..., 3:])
    anchor = np.broadcast_to(np.asarray(R0, float), (B, 3, 3)).copy()
    xi = np.zeros((B, 3))
    bg = np.broadcast_to(np.asarray(b0_g, float), (B, 3)).copy()
    tape.R.append(anchor.copy())
    if full is not None:
        f_a = full.get("f_a")
        calib_a = full.get("calib_a")
        g = np.asarray(full["gravity"], float)
        v = np.broadcast_to(np.asarray(full["v0"], float), (B, 3)).copy()
        p = np.broadcast_to(np.asarray(full["p0"], float), (B, 3)).copy()
        ba = np.broadcast_to(np.asarray(full["b0_a"], float), (B, 3)).copy()
        tape.v.append(v)
        tape.p.append(p)
        tape.b_a.append(ba)
    for k in range(N):
        h = dt[:, k : k + 1]
        u, ud = U[:, k], D[:, k]
        om = _corrected(u[:, :3], calib_g) - bg
        fg, cache_g = _call_field(f_g, bg, u, ud)
        xi_pre = xi + h * so3.jr_inv_apply(xi, om)
        bg_new = bg + h * fg
        R_new = anchor @ so3.exp_so3(xi_pre)
        sw = np.linalg.norm(xi_pre, axis=-1) > threshold
        tape.xi.append(xi)
        tape.b_g.append(bg)
        tape.omega.append(om)
        tape.fg_cache.append(cache_g)
        tape.anchor.append(anchor)
        tape.xi_pre.append(xi_pre)
        tape.switched.append(sw)
        if full is not None:
            R_k = tape.R[k]
            acc = _corrected(u[:, 3:], calib_a) - ba
            fa, cache_a = _call_field(f_a, ba, u, ud)
            v_new = v + h * (np.einsum("bij,bj->bi", R_k, acc) + g)
            p_new = p + h * v
            ba_new = ba + h * fa
            tape.fa_cache.append(cache_a)
            v, p, ba = v_new, p_new, ba_new
            tape.v.append(v)
            tape.p.append(p)
            tape.b_a.append(ba)
        tape.R.append(R_new)
        if np.any(sw):
            tape.switches += int(np.count_nonzero(sw))
            anchor = np.where(sw[:, None, None], R_new, anchor)
            xi = np.where(sw[:, None], 0.0, xi_pre)
        else:
            xi = xi_pre
        bg = bg_new
        _check_finite(xi, bg)
        if full is not None:
            _check_finite(v, p, ba)
    tape.xi.append(xi)
    tape.b_g.append(bg)
    tape.anchor.append(anchor)
    return tape


def unroll_full_euler(f_g, f_a, U, D, dt, R0, b0_g, v0, p0, b0_a, gravity, threshold=DEFAULT_THRESHOLD,
                      calib_g=None, calib_a=None):
    full = {"f_a": f_a, "v0": v0, "p0": p0, "b0_a": b0_a, "gravity": gravity, "calib_a": calib_a}
    return unroll_gyro_euler(f_g, U, D, dt, R0, b0_g, threshold, calib_g, full)


def _sample_control(control, ts):
    if hasattr(control, "eval_many"):
        u, ud = control.eval_many(ts)
    else:
        pairs = [control.eval(t) for t in ts]
        u = np.array([p[0] for p in pairs])
        ud = np.array([p[1] for p in pairs])
    u = np.asarray(u, float).reshape(len(ts), -1)
    ud = np.asarray(ud, float).reshape(len(ts), -1)
    if u.shape[1] == 3:
        u = np.concatenate([u, np.zeros_like(u)], axis=1)
        ud = np.concatenate([ud, np.zeros_like(ud)], axis=1)
    return u, ud


@dataclass
class CoupledPath:
    t: np.ndarray
    R: np.ndarray
    b_g: np.ndarray
    xi: np.ndarray = None
    v: np.ndarray = None
    p: np.ndarray = None
    b_a: np.ndarray = None
    switches: int = 0


def integrate_gyro_stage(f_g, control, R0, b0_g, grid, method="euler", threshold=DEFAULT_THRESHOLD, calib_g=None):
    """Rotation + gyro-bias system driven by ``control`` (6 channels, gyro first)."""
    return _integrate_coupled(f_g, None, control, CoupledState.from_pose(R0, b_g=b0_g), None, grid, method,
                              threshold, calib_g, None, full=False)


def integrate_full(f_g, f_a, control, init, gravity, grid, method="rk4", threshold=DEFAULT_THRESHOLD,
                   calib_g=None, calib_a=None):
    """Full strapdown system with both bias states.  ``init`` is a ``CoupledState``."""
    return _integrate_coupled(f_g, f_a, control, init, gravity, grid, method, threshold, calib_g, calib_a,
                              full=True)


def _integrate_coupled(f_g, f_a, control, init, gravity, grid, method, threshold, calib_g, calib_a, full):
    _check_method(method)
    ts = grid.times
    R0 = np.asarray(init.chart.R, float)
    if method == "euler":
        U, D = _sample_control(control, ts[:-1])
        args = (U[None], D[None], np.diff(ts)[None], R0[None], np.asarray(init.b_g, float)[None])
        if full:
            tape = unroll_full_euler(f_g, f_a, *args, np.asarray(init.v, float)[None],
                                     np.asarray(init.p, float)[None], np.asarray(init.b_a, float)[None], gravity,
                                     threshold, calib_g, calib_a)
        else:
            tape = unroll_gyro_euler(f_g, *args, threshold, calib_g)
        path = CoupledPath(
            t=ts.copy(),
            R=np.stack(tape.R, axis=1)[0],
            b_g=np.stack(tape.b_g, axis=1)[0],
            xi=np.stack(tape.xi, axis=1)[0],
            switches=tape.switches,
        )
        if full:
            path.v = np.stack(tape.v, axis=1)[0]
            path.p = np.stack(tape.p, axis=1)[0]
            path.b_a = np.stack(tape.b_a, axis=1)[0]
        return path
    return _rk4_coupled(f_g, f_a, control, init, R0, gravity, ts, threshold, calib_g, calib_a, full)


def _rk4_coupled(f_g, f_a, control, init, R0, gravity, ts, threshold, calib_g, calib_a, full):
    n = ts.size
    mids = 0.5 * (ts[:-1] + ts[1:])
    Uk, Dk = _sample_control(control, ts)
    Um, Dm = _sample_control(control, mids)
    g = None if gravity is None else np.asarray(gravity, float)
    anchor = np.asarray(R0, float)
    state = np.zeros(15)
    state[3:6] = init.b_g
    if full:
        state[6:9] = init.v
        state[9:12] = init.p
        state[12:15] = init.b_a

    def rhs(s, u, ud):
        xi, bg = s[0:3], s[3:6]
        out = np.zeros(15)
        om = _corrected(u[:3], calib_g) - bg
        out[0:3] = so3.jr_inv_apply(xi, om)
        out[3:6] = _call_field(f_g, bg, u, ud)[0]
        if full:
            v, ba = s[6:9], s[12:15]
            R = anchor @ so3.exp_so3(xi)
            out[6:9] = R @ (_corrected(u[3:], calib_a) - ba) + g
            out[9:12] = v
            out[12:15] = _call_field(f_a, ba, u, ud)[0]
        return out

    R = np.empty((n, 3, 3))
    S = np.empty((n, 15))
    xis = np.empty((n, 3))
    R[0], S[0], xis[0] = anchor, state, 0.0
    switches = 0
    for k in range(n - 1):
        h = ts[k + 1] - ts[k]
        k1 = rhs(state, Uk[k], Dk[k])
        k2 = rhs(state + 0.5 * h * k1, Um[k], Dm[k])
        k3 = rhs(state + 0.5 * h * k2, Um[k], Dm[k])
        k4 = rhs(state + h * k3, Uk[k + 1], Dk[k + 1])
        state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(state)
        R[k + 1] = anchor @ so3.exp_so3(state[0:3])
        if np.linalg.norm(state[0:3]) > threshold:
            anchor = R[k + 1]
            state[0:3] = 0.0
            switches += 1
        S[k + 1] = state
        xis[k + 1] = state[0:3]
    path = CoupledPath(t=ts.copy(), R=R, b_g=S[:, 3:6], xi=xis, switches=switches)
    if full:
        path.v, path.p, path.b_a = S[:, 6:9], S[:, 9:12], S[:, 12:15]
    return path
