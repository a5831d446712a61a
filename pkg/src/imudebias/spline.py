"""Causal cubic Hermite interpolation of sampled signals.

Knot slopes use backward differences, so the curve up to ``t_i`` never
depends on samples after ``t_i``.  The first slope copies the second one.
"""

import bisect

import numpy as np

from .errors import BadTimeline, NonFinite, OutOfRange, ShapeMismatch


class HermiteSpline:
    """Immutable piecewise-cubic interpolant with C1 continuity at knots."""

    def __init__(self, times, values, derivs):
        self.times = times
        self.values = values
        self.derivs = derivs
        self._times_list = times.tolist()
        # Sequential-query hint.  Always re-validated before use.
        self._hint = 0
        for arr in (times, values, derivs):
            arr.setflags(write=False)

    @property
    def t0(self):
        return self._times_list[0]

    @property
    def t1(self):
        return self._times_list[-1]

    def __len__(self):
        return len(self._times_list)

    def _segment(self, t):
        ts = self._times_list
        i = self._hint
        if ts[i] <= t < ts[i + 1]:
            return i
        if i + 2 < len(ts) and ts[i + 1] <= t < ts[i + 2]:
            self._hint = i + 1
            return i + 1
        i = bisect.bisect_right(ts, t) - 1
        i = min(max(i, 0), len(ts) - 2)
        self._hint = i
        return i

    def eval(self, t):
        """Return ``(value, derivative)`` at time ``t``."""
        t = float(t)
        if not (self.t0 <= t <= self.t1):
            raise OutOfRange(f"t={t!r} outside knot span [{self.t0!r}, {self.t1!r}]")
        i = self._segment(t)
        return self._eval_segment(i, t)

    def _eval_segment(self, i, t):
        ts = self._times_list
        ta = ts[i]
        if t == ta:
            return self.values[i].copy(), self.derivs[i].copy()
        h = ts[i + 1] - ta
        s = (t - ta) / h
        s2 = s * s
        s3 = s2 * s
        u0, u1 = self.values[i], self.values[i + 1]
        d0, d1 = self.derivs[i], self.derivs[i + 1]
        value = (2 * s3 - 3 * s2 + 1) * u0 + (s3 - 2 * s2 + s) * h * d0 + (-2 * s3 + 3 * s2) * u1 + (s3 - s2) * h * d1
        deriv = (6 * s2 - 6 * s) / h * (u0 - u1) + (3 * s2 - 4 * s + 1) * d0 + (3 * s2 - 2 * s) * d1
        return value, deriv

    def eval_many(self, ts):
        """Vectorised :meth:`eval` over an array of query times."""
        ts = np.asarray(ts, dtype=float)
        if ts.size and (ts.min() < self.t0 or ts.max() > self.t1):
            raise OutOfRange("query times outside knot span")
        i = np.clip(np.searchsorted(self.times, ts, side="right") - 1, 0, len(self) - 2)
        ta = self.times[i]
        h = self.times[i + 1] - ta
        s = ((ts - ta) / h).reshape(ts.shape + (1,) * (self.values.ndim - 1))
        hb = h.reshape(s.shape)
        s2, s3 = s * s, s * s * s
        u0, u1 = self.values[i], self.values[i + 1]
        d0, d1 = self.derivs[i], self.derivs[i + 1]
        value = (2 * s3 - 3 * s2 + 1) * u0 + (s3 - 2 * s2 + s) * hb * d0 + (-2 * s3 + 3 * s2) * u1 + (s3 - s2) * hb * d1
        deriv = (6 * s2 - 6 * s) / hb * (u0 - u1) + (3 * s2 - 4 * s + 1) * d0 + (3 * s2 - 2 * s) * d1
        exact = (ts == ta).reshape(s.shape)
        value = np.where(exact, u0, value)
        deriv = np.where(exact, d0, deriv)
        return value, deriv


def build_spline(times, values):
    """Build a :class:`HermiteSpline` through ``(times[i], values[i])``."""
    times = np.array(times, dtype=float)
    values = np.array(values, dtype=float)
    if times.ndim != 1:
        raise ShapeMismatch("times must be one-dimensional")
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != times.shape[0]:
        raise ShapeMismatch(f"{times.shape[0]} times but {values.shape[0]} values")
    if times.shape[0] < 2:
        raise BadTimeline("need at least two knots")
    dt = np.diff(times)
    if not np.all(dt > 0):
        raise BadTimeline("knot times must be strictly increasing")
    if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
        raise NonFinite("spline knots must be finite")
    derivs = np.empty_like(values)
    dt_b = dt.reshape((-1,) + (1,) * (values.ndim - 1))
    derivs[1:] = (values[1:] - values[:-1]) / dt_b
    derivs[0] = derivs[1]
    return HermiteSpline(times, values, derivs)
