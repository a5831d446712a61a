"""Sequence containers, EuRoC/TUM-VI loaders, ground-truth synchronisation,
a synthetic IMU generator with known bias, and output writers.

File conventions
----------------
* IMU CSV (EuRoC ``imu0/data.csv``): ``timestamp[ns], wx, wy, wz, ax, ay, az``.
* Ground truth CSV (EuRoC ``state_groundtruth_estimate0/data.csv``):
  ``timestamp[ns], px, py, pz, qw, qx, qy, qz, vx, vy, vz, bwx, bwy, bwz, bax, bay, baz``.
* TUM-VI mocap CSV: ``timestamp[ns], px, py, pz, qw, qx, qy, qz``.
* Trajectory text: ``timestamp tx ty tz qx qy qz qw`` (seconds, w last).
"""

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation as _Rot

from . import so3
from .errors import BadConfig, BadRow, MissingFile, NonMonotoneTime, NoOverlap, ShapeMismatch
from .rng import substream
from .spline import build_spline

GRAVITY = np.array([0.0, 0.0, -9.80665])

IMU_HEADER = (
    "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],"
    "a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]"
)
GT_HEADER = (
    "#timestamp, p_RS_R_x [m], p_RS_R_y [m], p_RS_R_z [m], q_RS_w [], q_RS_x [], q_RS_y [], q_RS_z [], "
    "v_RS_R_x [m s^-1], v_RS_R_y [m s^-1], v_RS_R_z [m s^-1], b_w_RS_S_x [rad s^-1], b_w_RS_S_y [rad s^-1], "
    "b_w_RS_S_z [rad s^-1], b_a_RS_S_x [m s^-2], b_a_RS_S_y [m s^-2], b_a_RS_S_z [m s^-2]"
)
BIAS_HEADER = "#timestamp [ns],bg_x,bg_y,bg_z,ba_x,ba_y,ba_z"

_GT_COLUMNS = {"euroc": 17, "tumvi": 8}
_IMU_CANDIDATES = ("mav0/imu0/data.csv", "imu0/data.csv", "imu.csv")
_GT_CANDIDATES = {
    "euroc": ("mav0/state_groundtruth_estimate0/data.csv", "state_groundtruth_estimate0/data.csv", "groundtruth.csv"),
    "tumvi": ("mav0/mocap0/data.csv", "mocap0/data.csv", "groundtruth.csv"),
}


@dataclass(frozen=True)
class GroundTruth:
    t: np.ndarray
    R: np.ndarray
    v: np.ndarray
    p: np.ndarray

    def __len__(self):
        return self.t.size

    def slice(self, i0, i1):
        return GroundTruth(self.t[i0:i1], self.R[i0:i1], self.v[i0:i1], self.p[i0:i1])


@dataclass(frozen=True)
class BiasSeries:
    b_g: np.ndarray
    b_a: np.ndarray

    def slice(self, i0, i1):
        return BiasSeries(self.b_g[i0:i1], self.b_a[i0:i1])


@dataclass(frozen=True)
class ImuSequence:
    """Timestamped raw samples, optionally with per-sample ground truth.

    ``t`` is in seconds relative to ``t0_ns`` (the absolute stamp of the
    first sample in the source file).
    """

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    gt: GroundTruth = None
    true_bias: BiasSeries = None
    t0_ns: int = 0
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = self.t.size
        if self.gyro.shape != (n, 3) or self.accel.shape != (n, 3):
            raise ShapeMismatch("gyro/accel must be (len(t), 3)")
        if self.gt is not None and len(self.gt) != n:
            raise ShapeMismatch("ground truth must be synchronised to the IMU stamps")

    def __len__(self):
        return self.t.size

    @property
    def u(self):
        return np.concatenate([self.gyro, self.accel], axis=1)

    def control(self):
        """Hermite spline of the 6-channel stream (gyro first)."""
        return build_spline(self.t, self.u)

    def slice(self, i0, i1):
        return ImuSequence(
            self.t[i0:i1],
            self.gyro[i0:i1],
            self.accel[i0:i1],
            None if self.gt is None else self.gt.slice(i0, i1),
            None if self.true_bias is None else self.true_bias.slice(i0, i1),
            self.t0_ns,
            self.extras,
        )

    def split(self, fraction=0.8):
        """First ``fraction`` of samples and the rest (sharing the boundary sample)."""
        k = int(round(fraction * (len(self) - 1)))
        return self.slice(0, k + 1), self.slice(k, len(self))

    def with_measurements(self, gyro, accel):
        return replace(self, gyro=np.asarray(gyro, float), accel=np.asarray(accel, float))


# Quaternion helpers (dataset files store w first, trajectory files w last).


def quat_wxyz_to_matrix(q):
    q = np.asarray(q, float)
    return _Rot.from_quat(q, scalar_first=True).as_matrix()


def matrix_to_quat_xyzw(R):
    q = _Rot.from_matrix(np.asarray(R, float)).as_quat()
    # Canonical sign: w >= 0.
    return np.where(q[..., 3:4] < 0, -q, q)


def matrix_to_quat_wxyz(R):
    q = matrix_to_quat_xyzw(R)
    return np.concatenate([q[..., 3:], q[..., :3]], axis=-1)


# Readers


def _find(root, candidates, what):
    root = Path(root)
    if root.is_file():
        return root
    for c in candidates:
        p = root / c
        if p.is_file():
            return p
    raise MissingFile(f"no {what} file under {root} (looked for {', '.join(candidates)})")


def _read_rows(path, ncols):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"{path} does not exist")
    stamps, rows = [], []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != ncols:
                raise BadRow(path, line_no, f"expected {ncols} columns, got {len(parts)}")
            try:
                stamps.append(int(parts[0]))
                rows.append([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise BadRow(path, line_no, str(exc)) from None
    if not stamps:
        raise BadRow(path, 0, "no data rows")
    stamps = np.array(stamps, dtype=np.int64)
    if np.any(np.diff(stamps) <= 0):
        i = int(np.argmax(np.diff(stamps) <= 0)) + 1
        raise NonMonotoneTime(f"{path}: timestamps not strictly increasing at data row {i + 1}")
    return stamps, np.array(rows, dtype=float)


def read_imu_csv(path, t0_ns=None):
    stamps, rows = _read_rows(path, 7)
    t0 = int(stamps[0]) if t0_ns is None else int(t0_ns)
    t = (stamps - t0).astype(float) * 1e-9
    return ImuSequence(t, rows[:, 0:3].copy(), rows[:, 3:6].copy(), t0_ns=t0)


def read_groundtruth_csv(path, t0_ns, convention="euroc", smooth_window=0):
    if convention not in _GT_COLUMNS:
        raise BadConfig(f"unknown ground-truth convention {convention!r}")
    stamps, rows = _read_rows(path, _GT_COLUMNS[convention])
    t = (stamps - int(t0_ns)).astype(float) * 1e-9
    p = rows[:, 0:3].copy()
    R = quat_wxyz_to_matrix(rows[:, 3:7])
    if convention == "euroc":
        v = rows[:, 7:10].copy()
    else:
        v = np.gradient(p, t, axis=0) if t.size > 1 else np.zeros_like(p)
    if smooth_window and smooth_window > 1:
        v = smooth_moving_average(v, smooth_window)
    return GroundTruth(t, R, v, p)


def smooth_moving_average(x, window):
    """Symmetric moving average along axis 0; edges use the available samples."""
    window = int(window)
    half = window // 2
    c = np.cumsum(np.vstack([np.zeros((1,) + x.shape[1:]), x]), axis=0)
    idx = np.arange(x.shape[0])
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, x.shape[0])
    return (c[hi] - c[lo]) / (hi - lo).reshape((-1,) + (1,) * (x.ndim - 1))


def load_euroc(path, convention="euroc", imu_file=None, gt_file=None, smooth_window=0, sync=True):
    """Load an EuRoC-layout sequence (or TUM-VI with ``convention='tumvi'``).

    ``imu_file`` selects a different IMU CSV, e.g. a calibrated stream, relative
    to ``path``.  With ``sync`` the ground truth is interpolated onto the IMU
    stamps and IMU samples outside its span are dropped.
    """
    root = Path(path)
    if not root.exists():
        raise MissingFile(f"{root} does not exist")
    imu_path = root / imu_file if imu_file else _find(root, _IMU_CANDIDATES, "IMU")
    gt_path = root / gt_file if gt_file else _find(root, _GT_CANDIDATES.get(convention, ()), "ground-truth")
    imu = read_imu_csv(imu_path)
    gt = read_groundtruth_csv(gt_path, imu.t0_ns, convention, smooth_window)
    if not sync:
        return imu, gt
    return synchronize(imu, gt)


def synchronize(imu, gt):
    """Interpolate ``gt`` onto the IMU stamps (no extrapolation)."""
    inside = (imu.t >= gt.t[0]) & (imu.t <= gt.t[-1])
    if not np.any(inside):
        raise NoOverlap("IMU and ground-truth time ranges do not overlap")
    idx = np.nonzero(inside)[0]
    # Keep a contiguous block so the stream stays uniformly sampled.
    i0, i1 = idx[0], idx[-1] + 1
    t = imu.t[i0:i1]
    n = gt.t.size
    j = np.clip(np.searchsorted(gt.t, t, side="right") - 1, 0, n - 1)
    jn = np.minimum(j + 1, n - 1)
    span = gt.t[jn] - gt.t[j]
    alpha = np.where(span > 0, (t - gt.t[j]) / np.where(span > 0, span, 1.0), 0.0)
    a = alpha[:, None]
    p = np.where(a == 0, gt.p[j], (1 - a) * gt.p[j] + a * gt.p[jn])
    v = np.where(a == 0, gt.v[j], (1 - a) * gt.v[j] + a * gt.v[jn])
    Ra = gt.R[j]
    rel = so3.log_so3(np.swapaxes(Ra, -1, -2) @ gt.R[jn])
    R = Ra @ so3.exp_so3(a * rel)
    R = np.where((alpha == 0)[:, None, None], Ra, R)
    sync_gt = GroundTruth(t.copy(), R, v, p)
    return ImuSequence(t.copy(), imu.gyro[i0:i1].copy(), imu.accel[i0:i1].copy(), sync_gt,
                       None if imu.true_bias is None else imu.true_bias.slice(i0, i1), imu.t0_ns)


# Writers


def _fmt(x):
    x = float(x)
    if x == 0.0:
        return "0"
    return np.format_float_positional(x, unique=True, trim="-")


def _fmt_g17(x):
    x = float(x)
    return "0" if x == 0.0 else f"{x:.17g}"


def _stamps_ns(seq_t, t0_ns):
    return [int(t0_ns) + int(round(t * 1e9)) for t in seq_t]


def write_imu_csv(path, seq):
    lines = [IMU_HEADER]
    for ns, w, a in zip(_stamps_ns(seq.t, seq.t0_ns), seq.gyro, seq.accel):
        lines.append(",".join([str(ns)] + [_fmt_g17(x) for x in (*w, *a)]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_groundtruth_csv(path, seq):
    gt = seq.gt
    if gt is None:
        raise BadConfig("sequence has no ground truth to write")
    q = matrix_to_quat_wxyz(gt.R)
    lines = [GT_HEADER]
    for ns, p, qq, v in zip(_stamps_ns(gt.t, seq.t0_ns), gt.p, q, gt.v):
        lines.append(",".join([str(ns)] + [_fmt_g17(x) for x in (*p, *qq, *v)] + ["0"] * 6))
    Path(path).write_text("\n".join(lines) + "\n")


def write_bias_csv(path, seq):
    if seq.true_bias is None:
        raise BadConfig("sequence has no bias series to write")
    lines = [BIAS_HEADER]
    for ns, bg, ba in zip(_stamps_ns(seq.t, seq.t0_ns), seq.true_bias.b_g, seq.true_bias.b_a):
        lines.append(",".join([str(ns)] + [_fmt_g17(x) for x in (*bg, *ba)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_bias_csv(path, t0_ns):
    stamps, rows = _read_rows(path, 7)
    return (stamps - int(t0_ns)).astype(float) * 1e-9, BiasSeries(rows[:, 0:3].copy(), rows[:, 3:6].copy())


def write_tum(path, t, R, p):
    """Write poses as ``timestamp tx ty tz qx qy qz qw`` lines, no header."""
    q = matrix_to_quat_xyzw(np.asarray(R, float).reshape(-1, 3, 3))
    lines = [" ".join(_fmt(x) for x in (tt, *pp, *qq)) for tt, pp, qq in zip(t, p, q)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_tum(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"{path} does not exist")
    rows = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise BadRow(path, line_no, f"expected 8 fields, got {len(parts)}")
            try:
                rows.append([float(x) for x in parts])
            except ValueError as exc:
                raise BadRow(path, line_no, str(exc)) from None
    if not rows:
        raise BadRow(path, 0, "no poses")
    a = np.array(rows)
    if np.any(np.diff(a[:, 0]) <= 0):
        raise NonMonotoneTime(f"{path}: timestamps not strictly increasing")
    R = _Rot.from_quat(a[:, 4:8]).as_matrix()
    return a[:, 0].copy(), R, a[:, 1:4].copy()


def write_outputs(seq, directory, trajectory=None):
    """Write the (debiased) IMU CSV and, if given, a trajectory file.

    ``trajectory`` is a ``(t, R, p)`` triple.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_imu_csv(directory / "imu.csv", seq)
    if trajectory is not None:
        write_tum(directory / "trajectory.txt", *trajectory)
    return directory


# Synthetic data


@dataclass
class BiasSpec:
    """Bias dynamics for one sensor.

    Modes: ``constant`` (b = c), ``sinusoidal`` (c + amp * sin(2 pi t / period
    + phase_i), phases 0, 2pi/3, 4pi/3), ``relaxation``
    (b' = -rate * (b - (c + gain * u_true)), b(0) = c).  ``random_walk`` adds
    a Brownian term with that intensity on top of any mode.
    """

    mode: str = "constant"
    constant: tuple = (0.0, 0.0, 0.0)
    drift_amplitude: float = 0.0
    drift_period: float = 600.0
    relax_rate: float = 0.1
    relax_gain: float = 0.0
    random_walk: float = 0.0

    def __post_init__(self):
        if self.mode not in ("constant", "sinusoidal", "relaxation"):
            raise BadConfig(f"unknown bias mode {self.mode!r}")
        if self.drift_period <= 0 or self.relax_rate < 0 or self.random_walk < 0:
            raise BadConfig("bias spec rates/periods must be non-negative (period positive)")


@dataclass
class SyntheticConfig:
    duration: float = 60.0
    rate: float = 200.0
    rot_amplitude: tuple = (0.6, 0.5, 1.0)
    rot_frequency: tuple = (0.11, 0.17, 0.07)
    rot_phase: tuple = (0.0, 1.0, 2.0)
    rot_offset: tuple = (0.0, 0.0, 0.0)
    pos_amplitude: tuple = (2.0, 1.5, 0.5)
    pos_frequency: tuple = (0.05, 0.08, 0.13)
    pos_phase: tuple = (0.0, 0.5, 1.0)
    gyro_bias: BiasSpec = field(default_factory=BiasSpec)
    accel_bias: BiasSpec = field(default_factory=BiasSpec)
    sigma_g: float = 0.0
    sigma_a: float = 0.0
    A_g: tuple = None
    A_a: tuple = None
    gravity: tuple = tuple(GRAVITY)
    seed: int = 0

    def __post_init__(self):
        if not self.rate > 0 or not self.duration > 0:
            raise BadConfig("rate and duration must be positive")
        if self.sigma_g < 0 or self.sigma_a < 0:
            raise BadConfig("noise levels must be non-negative")
        for name in ("rot_amplitude", "rot_frequency", "rot_phase", "rot_offset", "pos_amplitude",
                     "pos_frequency", "pos_phase", "gravity"):
            if np.shape(getattr(self, name)) != (3,):
                raise BadConfig(f"{name} must have 3 entries")
        for name in ("A_g", "A_a"):
            value = getattr(self, name)
            if value is not None and np.shape(value) != (3, 3):
                raise BadConfig(f"{name} must be 3x3")
        if isinstance(self.gyro_bias, dict):
            self.gyro_bias = BiasSpec(**self.gyro_bias)
        if isinstance(self.accel_bias, dict):
            self.accel_bias = BiasSpec(**self.accel_bias)


class Motion:
    """Closed-form rigid-body motion.

    The attitude is ``Exp(theta(t))`` with each rotation-vector component a
    sinusoid, so the body rate is ``J_r(theta) theta'`` exactly; position
    components are sinusoids as well.
    """

    def __init__(self, cfg):
        self.ra = np.asarray(cfg.rot_amplitude, float)
        self.rw = 2 * np.pi * np.asarray(cfg.rot_frequency, float)
        self.rp = np.asarray(cfg.rot_phase, float)
        self.ro = np.asarray(cfg.rot_offset, float)
        self.pa = np.asarray(cfg.pos_amplitude, float)
        self.pw = 2 * np.pi * np.asarray(cfg.pos_frequency, float)
        self.pp = np.asarray(cfg.pos_phase, float)
        self.g = np.asarray(cfg.gravity, float)

    def _t(self, t):
        return np.asarray(t, float)[..., None]

    def theta(self, t):
        return self.ro + self.ra * np.sin(self.rw * self._t(t) + self.rp)

    def R(self, t):
        return so3.exp_so3(self.theta(t))

    def omega(self, t):
        tt = self._t(t)
        dtheta = self.ra * self.rw * np.cos(self.rw * tt + self.rp)
        return np.einsum("...ij,...j->...i", so3.right_jacobian(self.theta(t)), dtheta)

    def position(self, t):
        return self.pa * np.sin(self.pw * self._t(t) + self.pp)

    def velocity(self, t):
        return self.pa * self.pw * np.cos(self.pw * self._t(t) + self.pp)

    def world_accel(self, t):
        return -self.pa * self.pw**2 * np.sin(self.pw * self._t(t) + self.pp)

    def specific_force(self, t):
        """Body-frame accelerometer signal ``R^T (p'' - g)``."""
        R = self.R(t)
        return np.einsum("...ji,...j->...i", R, self.world_accel(t) - self.g)

    def signals(self, t):
        """Clean 6-channel signal and its time derivative (finite-free, analytic)."""
        return np.concatenate([self.omega(t), self.specific_force(t)], axis=-1)


class MotionControl:
    """Exact continuous control for integrators: ``eval(t) -> (u, u')``.

    ``u'`` is a central difference with a small step; bias fields are
    usually zero when this control is used.
    """

    def __init__(self, motion, h=1e-6):
        self.motion = motion
        self.h = h

    def eval(self, t):
        u = self.motion.signals(t)
        ud = (self.motion.signals(t + self.h) - self.motion.signals(t - self.h)) / (2 * self.h)
        return u, ud

    def eval_many(self, ts):
        ts = np.asarray(ts, float)
        u = self.motion.signals(ts)
        ud = (self.motion.signals(ts + self.h) - self.motion.signals(ts - self.h)) / (2 * self.h)
        return u, ud


def _bias_series(spec, t, u_true_fn, rng, dt):
    c = np.asarray(spec.constant, float)
    n = t.size
    if spec.mode == "constant":
        b = np.broadcast_to(c, (n, 3)).copy()
    elif spec.mode == "sinusoidal":
        phases = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        b = c + spec.drift_amplitude * np.sin(2 * np.pi * t[:, None] / spec.drift_period + phases)
    else:
        # RK4 at ten times the sample rate.
        sub = 10
        h = dt / sub
        lam, gain = spec.relax_rate, spec.relax_gain

        def rhs(tt, bb):
            return -lam * (bb - (c + gain * u_true_fn(tt)))

        b = np.empty((n, 3))
        cur = c.copy()
        b[0] = cur
        for k in range(n - 1):
            tt = t[k]
            for _ in range(sub):
                k1 = rhs(tt, cur)
                k2 = rhs(tt + h / 2, cur + h / 2 * k1)
                k3 = rhs(tt + h / 2, cur + h / 2 * k2)
                k4 = rhs(tt + h, cur + h * k3)
                cur = cur + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                tt += h
            b[k + 1] = cur
    if spec.random_walk > 0:
        steps = rng.normal(0.0, spec.random_walk * np.sqrt(dt), size=(n - 1, 3))
        b[1:] += np.cumsum(steps, axis=0)
    return b


def generate_synthetic(cfg):
    """Synthetic sequence with exact ground truth and the true bias series.

    Measurements follow ``u_meas = A u + b(t) + n``.  The returned sequence's
    ``extras`` holds the clean signals and the :class:`Motion` object.
    """
    if isinstance(cfg, dict):
        cfg = SyntheticConfig(**cfg)
    step_ns = int(round(1e9 / cfg.rate))
    n = int(round(cfg.duration * cfg.rate)) + 1
    t = (np.arange(n, dtype=np.int64) * step_ns).astype(float) * 1e-9
    dt = step_ns * 1e-9
    motion = Motion(cfg)
    omega = motion.omega(t)
    accel = motion.specific_force(t)
    R = motion.R(t)
    gt = GroundTruth(t.copy(), R, motion.velocity(t), motion.position(t))

    bias_rng = substream(cfg.seed, "bias")
    bg = _bias_series(cfg.gyro_bias, t, motion.omega, bias_rng, dt)
    ba = _bias_series(cfg.accel_bias, t, motion.specific_force, bias_rng, dt)

    A_g = np.eye(3) if cfg.A_g is None else np.asarray(cfg.A_g, float)
    A_a = np.eye(3) if cfg.A_a is None else np.asarray(cfg.A_a, float)
    noise = substream(cfg.seed, "noise")
    ng = noise.normal(0.0, 1.0, size=(n, 3)) * cfg.sigma_g
    na = noise.normal(0.0, 1.0, size=(n, 3)) * cfg.sigma_a
    gyro = omega @ A_g.T + bg + ng
    acc = accel @ A_a.T + ba + na
    return ImuSequence(
        t,
        gyro,
        acc,
        gt,
        BiasSeries(bg, ba),
        0,
        {"clean_gyro": omega, "clean_accel": accel, "motion": motion, "config": cfg},
    )
