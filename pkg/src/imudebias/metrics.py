"""Trajectory error metrics.

Absolute errors (AOE in degrees, APE in metres) are RMS values after
aligning the estimate to the ground truth.  Relative errors (ROE, RPE)
are means over sub-trajectories whose ground-truth chord length first
reaches a distance ``d``.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import so3
from .errors import LengthMismatch, NonMonotoneTime, ShapeMismatch, TooShort

DEFAULT_DISTANCES = (5.0, 10.0, 15.0, 20.0)
ALIGNMENTS = ("first_pose", "umeyama")


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray = None

    def __post_init__(self):
        t = np.asarray(self.t, float)
        R = np.asarray(self.R, float)
        p = np.asarray(self.p, float)
        n = t.size
        if t.ndim != 1 or R.shape != (n, 3, 3) or p.shape != (n, 3):
            raise ShapeMismatch("trajectory needs t (n,), R (n,3,3), p (n,3)")
        if self.v is not None and np.shape(self.v) != (n, 3):
            raise ShapeMismatch("v must be (n, 3)")
        if n > 1 and not np.all(np.diff(t) > 0):
            raise NonMonotoneTime("trajectory stamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "p", p)
        if self.v is not None:
            object.__setattr__(self, "v", np.asarray(self.v, float))

    def __len__(self):
        return self.t.size

    def transformed(self, Rg, pg):
        """Left-multiply every pose by ``(Rg, pg)``."""
        Rg = np.asarray(Rg, float)
        v = None if self.v is None else self.v @ Rg.T
        return Trajectory(self.t, Rg @ self.R, self.p @ Rg.T + pg, v)

    @classmethod
    def from_groundtruth(cls, gt):
        return cls(gt.t, gt.R, gt.p, gt.v)


def _check_pair(est, gt):
    if len(est) != len(gt):
        raise LengthMismatch(f"estimate has {len(est)} poses, ground truth {len(gt)}")
    if len(est) == 0:
        raise LengthMismatch("empty trajectories")


def align_first_pose(est, gt):
    """Rigidly move ``est`` so its first pose coincides with ``gt``'s."""
    _check_pair(est, gt)
    if np.array_equal(est.R[0], gt.R[0]) and np.array_equal(est.p[0], gt.p[0]):
        return est  # already aligned; avoids R R^T roundoff
    Rg = gt.R[0] @ est.R[0].T
    pg = gt.p[0] - Rg @ est.p[0]
    return est.transformed(Rg, pg)


def align_umeyama(est, gt):
    """Least-squares rotation + translation (no scale) on positions."""
    _check_pair(est, gt)
    mu_e, mu_g = est.p.mean(axis=0), gt.p.mean(axis=0)
    cov = (gt.p - mu_g).T @ (est.p - mu_e) / len(est)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    Rg = U @ S @ Vt
    return est.transformed(Rg, mu_g - Rg @ mu_e)


def align(est, gt, method="first_pose"):
    if method == "first_pose":
        return align_first_pose(est, gt)
    if method == "umeyama":
        return align_umeyama(est, gt)
    raise ValueError(f"alignment must be one of {ALIGNMENTS}, got {method!r}")


def orientation_errors(est, gt):
    """Per-pose ``|Log(R_est^T R_gt)|`` in radians."""
    _check_pair(est, gt)
    return np.linalg.norm(so3.log_so3(np.swapaxes(est.R, -1, -2) @ gt.R), axis=-1)


def position_errors(est, gt):
    _check_pair(est, gt)
    return np.linalg.norm(est.p - gt.p, axis=-1)


def aoe(est, gt):
    """RMS orientation error in degrees (no alignment applied here)."""
    e = orientation_errors(est, gt)
    return float(np.degrees(np.sqrt(np.mean(e * e))))


def ape(est, gt):
    """RMS position error in metres (no alignment applied here)."""
    e = position_errors(est, gt)
    return float(np.sqrt(np.mean(e * e)))


def velocity_ape(est, gt):
    """RMS velocity error in m/s."""
    _check_pair(est, gt)
    if est.v is None or gt.v is None:
        raise ShapeMismatch("both trajectories need velocities")
    e = np.linalg.norm(est.v - gt.v, axis=-1)
    return float(np.sqrt(np.mean(e * e)))


def arc_length(p):
    """Cumulative chord length along ``p``, starting at 0."""
    p = np.asarray(p, float)
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=-1))])


def relative_pairs(gt, d, stride=1):
    """``(s0, s1)`` pairs with ``s1`` the first index at arc length >= ``d``."""
    s = arc_length(gt.p)
    starts = np.arange(0, len(gt), int(stride))
    ends = np.searchsorted(s, s[starts] + d, side="left")
    ok = ends < len(gt)
    return starts[ok], ends[ok]


def _relative(R, p, i, j):
    Ri = np.swapaxes(R[i], -1, -2)
    return Ri @ R[j], np.einsum("kij,kj->ki", Ri, p[j] - p[i])


def relative_errors(est, gt, d, stride=1):
    """Mean ROE (degrees) and RPE (metres) at distance ``d``, and the pair count."""
    _check_pair(est, gt)
    i, j = relative_pairs(gt, d, stride)
    if i.size == 0:
        raise TooShort(f"ground truth is shorter than {d} m")
    dRg, dpg = _relative(gt.R, gt.p, i, j)
    dRe, dpe = _relative(est.R, est.p, i, j)
    # X_e = dX_gt^-1 dX_est
    Rt = np.swapaxes(dRg, -1, -2)
    R_err = Rt @ dRe
    p_err = np.einsum("kij,kj->ki", Rt, dpe - dpg)
    roe = np.degrees(np.mean(np.linalg.norm(so3.log_so3(R_err), axis=-1)))
    rpe = np.mean(np.linalg.norm(p_err, axis=-1))
    return float(roe), float(rpe), int(i.size)


@dataclass
class MetricReport:
    aoe: float
    ape: float
    alignment: str
    distances: list = field(default_factory=list)
    roe: list = field(default_factory=list)
    rpe: list = field(default_factory=list)
    pairs: list = field(default_factory=list)

    def rows(self):
        out = [("aoe_deg", "", self.aoe, ""), ("ape_m", "", self.ape, "")]
        for d, ro, rp, n in zip(self.distances, self.roe, self.rpe, self.pairs):
            out.append(("roe_deg", d, ro, n))
            out.append(("rpe_m", d, rp, n))
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "distance_m", "value", "pairs"])
            w.writerow(["alignment", "", self.alignment, ""])
            for name, d, value, n in self.rows():
                w.writerow([name, d, repr(float(value)) if np.isfinite(value) else "nan", n])

    def pretty(self):
        lines = [
            f"alignment: {self.alignment}",
            f"AOE  {self.aoe:10.4f} deg",
            f"APE  {self.ape:10.4f} m",
        ]
        if self.distances:
            lines.append(f"{'d (m)':>8} {'ROE (deg)':>12} {'RPE (m)':>12} {'pairs':>7}")
            for d, ro, rp, n in zip(self.distances, self.roe, self.rpe, self.pairs):
                lines.append(f"{d:8g} {ro:12.4f} {rp:12.4f} {n:7d}")
        return "\n".join(lines) + "\n"


def evaluate(est, gt, distances=DEFAULT_DISTANCES, alignment="first_pose", stride=1):
    """Full report.  Distances longer than the trajectory get NaN and 0 pairs."""
    aligned = align(est, gt, alignment)
    rep = MetricReport(aoe(aligned, gt), ape(aligned, gt), alignment)
    for d in distances:
        try:
            ro, rp, n = relative_errors(est, gt, d, stride)
        except TooShort:
            ro, rp, n = float("nan"), float("nan"), 0
        rep.distances.append(float(d))
        rep.roe.append(ro)
        rep.rpe.append(rp)
        rep.pairs.append(n)
    return rep


def write_error_csv(path, est, gt, alignment="first_pose"):
    """Per-sample orientation (deg) and position (m) errors after alignment."""
    aligned = align(est, gt, alignment)
    eo = np.degrees(orientation_errors(aligned, gt))
    ep = position_errors(aligned, gt)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "orientation_error_deg", "position_error_m"])
        for row in zip(gt.t, eo, ep):
            w.writerow([repr(float(x)) for x in row])
