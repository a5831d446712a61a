"""Hierarchical training of the bias fields.

The gyro field is trained first on short ground-truth segments with a
rotation loss; it is then frozen while the accel field is trained with a
velocity/position loss.  Gradients come from a hand-written reverse pass
through the explicit Euler unroll recorded by :func:`ode.unroll_gyro_euler`.
"""

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import bias_net, ode, so3
from .bias_net import LinearCalib, MlpParams
from .dataio import GRAVITY, BiasSeries, ImuSequence
from .errors import BadConfig, Diverged, LengthMismatch, MisalignedTimeline, NonFinite, TooShort
from .rng import substream
from .spline import build_spline

STAGES = ("gyro", "accel", "linear")


@dataclass
class TrainConfig:
    N: int = 16
    epochs: int = 1800
    lr: float = 0.005
    # StepLR: lr *= lr_decay every lr_step epochs (constants are our choice).
    lr_step: int = 600
    lr_decay: float = 0.5
    batch_size: int = 64
    stride: int = 4
    # Validation segments are laid end to end unless set.
    val_stride: int = None
    seed: int = 0
    gravity: tuple = tuple(GRAVITY)
    w_rot: float = 1.0
    w_vp: float = 1.0
    train_fraction: float = 0.8
    # Gaussian noise on the segment initial biases (augmentation).
    init_noise_g: float = 0.0
    init_noise_a: float = 0.0
    threshold: float = ode.DEFAULT_THRESHOLD
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if int(self.N) < 2:
            raise BadConfig("segment length N must be >= 2")
        for name in ("epochs",):
            if int(getattr(self, name)) < 0:
                raise BadConfig(f"{name} must be >= 0")
        for name in ("lr", "lr_step", "lr_decay", "batch_size", "stride", "threshold"):
            if not getattr(self, name) > 0:
                raise BadConfig(f"{name} must be positive")
        if self.val_stride is not None and not self.val_stride > 0:
            raise BadConfig("val_stride must be positive")
        if self.w_rot < 0 or self.w_vp < 0 or self.init_noise_g < 0 or self.init_noise_a < 0:
            raise BadConfig("loss weights and noise levels must be non-negative")
        if not 0.0 < self.train_fraction <= 1.0:
            raise BadConfig("train_fraction must be in (0, 1]")
        if np.shape(self.gravity) != (3,):
            raise BadConfig("gravity must have 3 entries")
        self.N = int(self.N)
        self.epochs = int(self.epochs)
        self.batch_size = int(self.batch_size)
        self.stride = int(self.stride)
        self.lr_step = int(self.lr_step)


# Optimiser


@dataclass
class OptimState:
    """Adam moments over the flattened parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_update(x, g, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam step on flat ``x``; ``state`` is updated in place."""
    if state.m.shape != np.shape(x) or np.shape(g) != np.shape(x):
        raise LengthMismatch("optimiser state does not match the parameters")
    b1, b2 = betas
    state.step += 1
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * g * g
    mhat = state.m / (1 - b1**state.step)
    vhat = state.v / (1 - b2**state.step)
    return x - lr * mhat / (np.sqrt(vhat) + eps)


def step_lr(base, epoch, step, decay):
    """Learning rate for a 0-based ``epoch``."""
    return base * decay ** (epoch // step)


# Initial bias and segments


def estimate_initial_bias(poses, meas, gravity=GRAVITY):
    """Per-sample bias implied by consecutive ground-truth poses.

    ``b_g[k] = w_meas[k] - Log(R_k^T R_{k+1}) / dt`` and
    ``b_a[k] = a_meas[k] - R_k^T ((v_{k+1} - v_k) / dt - g)``; the last
    sample repeats the one before it.
    """
    t = np.asarray(poses.t, float)
    if t.shape != meas.t.shape or not np.array_equal(t, meas.t):
        raise MisalignedTimeline("ground truth and measurements must share timestamps")
    if t.size < 2:
        raise MisalignedTimeline("need at least two samples")
    dt = np.diff(t)
    if not np.all(dt > 0):
        raise MisalignedTimeline("consecutive stamps must be strictly increasing")
    R = poses.R
    rel = np.swapaxes(R[:-1], -1, -2) @ R[1:]
    bg = np.empty_like(meas.gyro)
    bg[:-1] = meas.gyro[:-1] - so3.log_so3(rel) / dt[:, None]
    bg[-1] = bg[-2]
    world = (poses.v[1:] - poses.v[:-1]) / dt[:, None] - np.asarray(gravity, float)
    ba = np.empty_like(meas.accel)
    ba[:-1] = meas.accel[:-1] - np.einsum("kji,kj->ki", R[:-1], world)
    ba[-1] = ba[-2]
    return BiasSeries(bg, ba)


def segment_starts(length, N, stride):
    if length <= N:
        raise TooShort(f"sequence of {length} samples is too short for segments of {N} steps")
    return np.arange(0, length - N, int(stride))


@dataclass
class SegmentBatch:
    """``B`` segments of ``N`` steps (``N + 1`` samples) each.

    Ground truth arrays have ``N + 1`` entries along axis 1, the controls
    ``U``/``D`` and steps ``dt`` have ``N`` (values at step start times).
    """

    starts: np.ndarray
    R_gt: np.ndarray
    v_gt: np.ndarray
    p_gt: np.ndarray
    U: np.ndarray
    D: np.ndarray
    dt: np.ndarray
    bg0: np.ndarray
    ba0: np.ndarray

    def __len__(self):
        return self.starts.size

    @property
    def N(self):
        return self.dt.shape[1]

    @property
    def R0(self):
        return self.R_gt[:, 0]

    @property
    def v0(self):
        return self.v_gt[:, 0]

    @property
    def p0(self):
        return self.p_gt[:, 0]

    def subset(self, idx):
        return SegmentBatch(*(getattr(self, f)[idx] for f in _BATCH_FIELDS))

    def with_bias(self, bg0=None, ba0=None):
        return replace(self, bg0=self.bg0 if bg0 is None else bg0, ba0=self.ba0 if ba0 is None else ba0)

    @staticmethod
    def concat(batches):
        return SegmentBatch(*(np.concatenate([getattr(b, f) for b in batches]) for f in _BATCH_FIELDS))


_BATCH_FIELDS = ("starts", "R_gt", "v_gt", "p_gt", "U", "D", "dt", "bg0", "ba0")


class SegmentSource:
    """Precomputed controls and initial-bias estimates for one sequence."""

    def __init__(self, seq, gravity=GRAVITY):
        if seq.gt is None:
            raise BadConfig("training data needs ground truth")
        self.seq = seq
        spline = build_spline(seq.t, seq.u)
        self.u = np.asarray(spline.values)
        self.ud = np.asarray(spline.derivs)
        self.dt = np.diff(seq.t)
        self.bias = estimate_initial_bias(seq.gt, seq, gravity)

    def __len__(self):
        return len(self.seq)

    def batch(self, starts, N):
        starts = np.asarray(starts, dtype=int)
        idx = starts[:, None] + np.arange(N + 1)
        steps = idx[:, :-1]
        gt = self.seq.gt
        return SegmentBatch(
            starts, gt.R[idx], gt.v[idx], gt.p[idx], self.u[steps], self.ud[steps], self.dt[steps],
            self.bias.b_g[starts], self.bias.b_a[starts],
        )


def epoch_order(n, seed, epoch):
    """Shuffled segment order for one epoch; reproducible from ``seed``."""
    return substream(seed, "shuffle", epoch).permutation(n)


def sample_segments(seq, N, stride, seed, epoch=0, gravity=GRAVITY):
    """All stride-spaced segments of ``seq`` in this epoch's shuffled order."""
    source = seq if isinstance(seq, SegmentSource) else SegmentSource(seq, gravity)
    starts = segment_starts(len(source), N, stride)
    return source.batch(starts[epoch_order(starts.size, seed, epoch)], N)


# Losses


def _swap(m):
    return np.swapaxes(m, -1, -2)


def loss_rotation(est, gt):
    """Mean of ``|Log(R_est R_gt^T)|^2`` over the last-but-one axis."""
    est, gt = np.asarray(est, float), np.asarray(gt, float)
    if est.shape != gt.shape:
        raise LengthMismatch(f"{est.shape} vs {gt.shape}")
    if est.ndim < 3 or est.shape[-3] < 1:
        raise LengthMismatch("need at least one rotation")
    e = so3.log_so3(est @ _swap(gt))
    return np.mean(np.sum(e * e, axis=-1), axis=-1)


def loss_vel_pos(est, gt):
    """Mean of ``|p_est - p|^2 + |v_est - v|^2``; arguments are ``(v, p)`` pairs."""
    (ve, pe), (vg, pg) = est, gt
    ve, pe, vg, pg = (np.asarray(a, float) for a in (ve, pe, vg, pg))
    if not (ve.shape == pe.shape == vg.shape == pg.shape):
        raise LengthMismatch("velocity/position arrays differ in shape")
    if ve.ndim < 2 or ve.shape[-2] < 1:
        raise LengthMismatch("need at least one sample")
    sq = np.sum((pe - pg) ** 2, axis=-1) + np.sum((ve - vg) ** 2, axis=-1)
    return np.mean(sq, axis=-1)


# Reverse passes


def _gyro_roles(params_g, calib_g=None):
    """(field, calib) for a gyro model."""
    if params_g is None:
        return None, calib_g
    if isinstance(params_g, LinearCalib):
        return None, params_g
    if isinstance(params_g, MlpParams):
        return params_g, calib_g
    raise TypeError(f"unsupported gyro model {type(params_g).__name__}")


_accel_roles = _gyro_roles


class _Accum:
    """Gradient accumulator in the same layout as the trained model."""

    def __init__(self, model):
        self.model = model
        if isinstance(model, MlpParams):
            self.arrays = [np.zeros_like(a) for a in model.arrays()]
        else:
            self.arrays = [np.zeros((3, 3)), np.zeros(3)]

    def field(self, cache, upstream):
        grads, gx = bias_net.backward(self.model, cache, upstream)
        for acc, g in zip(self.arrays, grads):
            acc += g
        return gx[..., :3] / self.model.config.bias_scale

    def calib(self, g_out, u_in):
        self.arrays[0] += g_out.T @ u_in
        self.arrays[1] += g_out.sum(axis=0)

    def result(self):
        if isinstance(self.model, MlpParams):
            return MlpParams(self.model.config, self.arrays[0::2], self.arrays[1::2])
        return LinearCalib(self.arrays[0], self.arrays[1], self.model.sensor)


def _gyro_b0(batch, params_g):
    return np.zeros_like(batch.bg0) if isinstance(params_g, LinearCalib) else batch.bg0


def _accel_b0(batch, params_a):
    return np.zeros_like(batch.ba0) if isinstance(params_a, LinearCalib) else batch.ba0


def _check_euler(method):
    if method != "euler":
        raise ValueError("gradients are only available for the explicit Euler unroll")


def segment_loss_and_grad_gyro(params_g, batch, threshold=ode.DEFAULT_THRESHOLD, weight=1.0, calib_g=None,
                               method="euler", need_grad=True):
    """Rotation loss of a segment batch and its gradient w.r.t. ``params_g``.

    ``params_g`` is an :class:`MlpParams` (bias field) or a
    :class:`LinearCalib` (constant calibration, no field).  The loss is the
    batch mean of the per-segment rotation losses times ``weight``.
    """
    _check_euler(method)
    f_g, calib = _gyro_roles(params_g, calib_g)
    tape = ode.unroll_gyro_euler(f_g, batch.U, batch.D, batch.dt, batch.R0, _gyro_b0(batch, params_g),
                                 threshold, calib)
    B, N = batch.dt.shape
    R_gt = batch.R_gt[:, 1:]
    R_hat = np.stack(tape.R[1:], axis=1)
    e = so3.log_so3(R_hat @ _swap(R_gt))
    loss = weight * float(np.mean(np.sum(e * e, axis=-1)))
    if not need_grad:
        return loss, None
    # Right-perturbation covector on each estimated rotation.
    g_rot = (2.0 * weight / (N * B)) * np.einsum("bkji,bkj->bki", R_gt, e)

    acc = _Accum(params_g)
    train_field = isinstance(params_g, MlpParams)
    g_xi = np.zeros((B, 3))
    g_anchor = np.zeros((B, 3))
    g_bg = np.zeros((B, 3))
    for k in range(N - 1, -1, -1):
        h = tape.dt[:, k : k + 1]
        sw = tape.switched[k][:, None]
        # After a switch the next anchor is this rotation and xi restarts at 0.
        g_R = g_rot[:, k] + np.where(sw, g_anchor, 0.0)
        g_pre = np.where(sw, 0.0, g_xi)
        g_anc = np.where(sw, 0.0, g_anchor)
        xi_pre = tape.xi_pre[k]
        g_pre = g_pre + so3.jr_t_apply(xi_pre, g_R)
        g_anc = g_anc + np.einsum("bij,bj->bi", so3.exp_so3(xi_pre), g_R)

        xi, om = tape.xi[k], tape.omega[k]
        g_xi = g_pre + h * so3.jr_inv_apply_vjp_xi(xi, om, g_pre)
        g_om = h * so3.jr_inv_t_apply(xi, g_pre)
        g_b = g_bg - g_om
        if f_g is not None:
            up = h * g_bg
            if train_field:
                g_b = g_b + acc.field(tape.fg_cache[k], up)
            else:
                _, gx = bias_net.backward(f_g, tape.fg_cache[k], up)
                g_b = g_b + gx[..., :3] / f_g.config.bias_scale
        if not train_field:
            acc.calib(g_om, tape.w[:, k])
        g_bg = g_b
        g_anchor = g_anc
    return loss, acc.result()


def segment_loss_and_grad_accel(params_a, params_g, batch, gravity=GRAVITY, threshold=ode.DEFAULT_THRESHOLD,
                                weight=1.0, calib_g=None, calib_a=None, method="euler", need_grad=True):
    """Velocity/position loss and its gradient w.r.t. ``params_a`` only.

    The gyro model is frozen: it only shapes the attitude used to rotate
    the specific force.
    """
    _check_euler(method)
    f_g, cal_g = _gyro_roles(params_g, calib_g)
    f_a, cal_a = _accel_roles(params_a, calib_a)
    tape = ode.unroll_full_euler(f_g, f_a, batch.U, batch.D, batch.dt, batch.R0, _gyro_b0(batch, params_g),
                                 batch.v0, batch.p0, _accel_b0(batch, params_a), gravity, threshold, cal_g, cal_a)
    B, N = batch.dt.shape
    V = np.stack(tape.v[1:], axis=1)
    P = np.stack(tape.p[1:], axis=1)
    ev = V - batch.v_gt[:, 1:]
    ep = P - batch.p_gt[:, 1:]
    loss = weight * float(np.mean(np.sum(ev * ev, axis=-1) + np.sum(ep * ep, axis=-1)))
    if not need_grad:
        return loss, None
    c = 2.0 * weight / (N * B)
    gV, gP = c * ev, c * ep

    acc = _Accum(params_a)
    train_field = isinstance(params_a, MlpParams)
    g_v = np.zeros((B, 3))
    g_p = np.zeros((B, 3))
    g_ba = np.zeros((B, 3))
    for k in range(N - 1, -1, -1):
        h = tape.dt[:, k : k + 1]
        gv1 = g_v + gV[:, k]
        gp1 = g_p + gP[:, k]
        g_acc = h * np.einsum("bji,bj->bi", tape.R[k], gv1)
        g_v = gv1 + h * gp1
        g_p = gp1
        g_b = g_ba - g_acc
        if f_a is not None:
            up = h * g_ba
            if train_field:
                g_b = g_b + acc.field(tape.fa_cache[k], up)
            else:
                _, gx = bias_net.backward(f_a, tape.fa_cache[k], up)
                g_b = g_b + gx[..., :3] / f_a.config.bias_scale
        if not train_field:
            acc.calib(g_acc, tape.a[:, k])
        g_ba = g_b
    return loss, acc.result()


# Training loop


@dataclass
class TrainResult:
    stage: str
    params: object
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("nan")
    elapsed: float = 0.0


def _as_sequences(data):
    if isinstance(data, ImuSequence):
        return [data]
    seqs = list(data)
    if not seqs or not all(isinstance(s, ImuSequence) for s in seqs):
        raise BadConfig("training data must be an ImuSequence or a list of them")
    return seqs


def _split(seqs, cfg):
    train, val = [], []
    for s in seqs:
        if cfg.train_fraction >= 1.0:
            train.append(s)
        else:
            a, b = s.split(cfg.train_fraction)
            train.append(a)
            val.append(b)
    return train, val


def _pool(seqs, cfg, stride):
    batches = []
    for s in seqs:
        src = SegmentSource(s, cfg.gravity)
        if len(src) <= cfg.N:
            continue
        batches.append(src.batch(segment_starts(len(src), cfg.N, stride), cfg.N))
    if not batches:
        raise TooShort(f"no sequence is longer than N = {cfg.N} samples")
    return SegmentBatch.concat(batches)


def _sensor(stage, params):
    if stage == "linear":
        return getattr(params, "sensor", "gyro")
    return stage


def _default_params(stage, net_config, seed):
    if stage == "linear":
        return LinearCalib.identity("gyro")
    if net_config is None:
        net_config = bias_net.NetConfig(sensor=stage, seed=seed)
    if net_config.sensor != stage:
        raise BadConfig(f"network configured for {net_config.sensor!r} in the {stage!r} stage")
    return bias_net.init_params(net_config)


def stage_loss(stage_sensor, params, batch, cfg, frozen_g=None, need_grad=True, chunk=None):
    """Batch loss (and gradient) for the stage that trains ``params``."""
    if chunk is not None and len(batch) > chunk and not need_grad:
        total = 0.0
        for i in range(0, len(batch), chunk):
            part = batch.subset(slice(i, i + chunk))
            total += stage_loss(stage_sensor, params, part, cfg, frozen_g, False)[0] * len(part)
        return total / len(batch), None
    if stage_sensor == "gyro":
        return segment_loss_and_grad_gyro(params, batch, cfg.threshold, cfg.w_rot, need_grad=need_grad)
    return segment_loss_and_grad_accel(params, frozen_g, batch, cfg.gravity, cfg.threshold, cfg.w_vp,
                                       need_grad=need_grad)


def train(stage, data, cfg=None, params=None, frozen_g=None, net_config=None, log=None):
    """Train one stage and return the best-validation parameters.

    ``stage`` is ``"gyro"``, ``"accel"`` (``frozen_g`` is the trained gyro
    model) or ``"linear"`` (a :class:`LinearCalib`; its ``sensor`` picks
    the loss).  ``data`` is one sequence or a list; each is split into a
    training head and a validation tail.
    """
    if stage not in STAGES:
        raise BadConfig(f"stage must be one of {STAGES}, got {stage!r}")
    cfg = cfg or TrainConfig()
    t_start = time.perf_counter()
    if params is None:
        params = _default_params(stage, net_config, cfg.seed)
    if stage == "linear" and not isinstance(params, LinearCalib):
        raise BadConfig("the linear stage trains a LinearCalib")
    sensor = _sensor(stage, params)
    params = params.copy()

    train_seqs, val_seqs = _split(_as_sequences(data), cfg)
    pool = _pool(train_seqs, cfg, cfg.stride)
    val = _pool(val_seqs, cfg, cfg.val_stride or cfg.N) if val_seqs else pool

    def val_loss(p):
        return stage_loss(sensor, p, val, cfg, frozen_g, need_grad=False, chunk=1024)[0]

    best = params.copy()
    try:
        best_val = val_loss(params)
    except (NonFinite, ArithmeticError) as exc:
        raise Diverged(f"initial validation failed: {exc}") from exc
    if not np.isfinite(best_val):
        raise Diverged("initial validation loss is not finite")
    best_epoch = 0
    history = []
    x = params.flat()
    opt = OptimState.zeros(x.size)
    aug = substream(cfg.seed, "augment")
    noise = cfg.init_noise_g if sensor == "gyro" else cfg.init_noise_a
    n = len(pool)
    for epoch in range(cfg.epochs):
        lr = step_lr(cfg.lr, epoch, cfg.lr_step, cfg.lr_decay)
        order = epoch_order(n, cfg.seed, epoch)
        losses, weights = [], []
        for i in range(0, n, cfg.batch_size):
            batch = pool.subset(order[i : i + cfg.batch_size])
            if noise > 0 and not isinstance(params, LinearCalib):
                if sensor == "gyro":
                    batch = batch.with_bias(bg0=batch.bg0 + aug.normal(0.0, noise, batch.bg0.shape))
                else:
                    batch = batch.with_bias(ba0=batch.ba0 + aug.normal(0.0, noise, batch.ba0.shape))
            try:
                loss, grad = stage_loss(sensor, params, batch, cfg, frozen_g)
            except (NonFinite, ArithmeticError) as exc:
                raise Diverged(f"epoch {epoch + 1}: {exc}") from exc
            g = grad.flat()
            if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                raise Diverged(f"non-finite loss or gradient at epoch {epoch + 1}")
            x = adam_update(x, g, opt, lr, cfg.betas, cfg.eps)
            params = params.with_flat(x)
            losses.append(loss)
            weights.append(len(batch))
        train_loss = float(np.average(losses, weights=weights))
        try:
            v = val_loss(params)
        except (NonFinite, ArithmeticError) as exc:
            raise Diverged(f"validation failed at epoch {epoch + 1}: {exc}") from exc
        if not np.isfinite(v):
            raise Diverged(f"non-finite validation loss at epoch {epoch + 1}")
        history.append({"epoch": epoch + 1, "train_loss": train_loss, "val_loss": v, "lr": lr})
        if v < best_val:
            best_val, best, best_epoch = v, params.copy(), epoch + 1
        if log is not None:
            log(history[-1])
    return TrainResult(stage, best, history, best_epoch, best_val, time.perf_counter() - t_start)


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["train_loss"])), repr(float(row["val_loss"]))])


# Debiasing


def initial_bias(seq, window=1, gravity=GRAVITY):
    """Mean of :func:`estimate_initial_bias` over the first ``window`` samples."""
    if seq.gt is None:
        raise BadConfig("no ground truth to estimate the initial bias from; pass b0")
    est = estimate_initial_bias(seq.gt, seq, gravity)
    w = max(1, min(int(window), len(seq)))
    return est.b_g[:w].mean(axis=0), est.b_a[:w].mean(axis=0)


def debias(params_g, params_a, seq, b0=None, window=1, method="euler", gravity=GRAVITY):
    """Integrate the bias fields causally over ``seq`` and subtract them.

    ``b0`` is ``(b_g, b_a)``; when omitted it comes from the ground truth
    via :func:`initial_bias`.  Linear calibrations are applied directly
    (their state stays zero).  The bias trajectory is returned in
    ``extras["bias"]`` of the output sequence.
    """
    ode._check_method(method)
    f_g, cal_g = _gyro_roles(params_g)
    f_a, cal_a = _accel_roles(params_a)
    if b0 is None:
        b0 = initial_bias(seq, window, gravity)
    bg0, ba0 = (np.asarray(b, float).reshape(3) for b in b0)
    if isinstance(params_g, LinearCalib):
        bg0 = np.zeros(3)
    if isinstance(params_a, LinearCalib):
        ba0 = np.zeros(3)

    spline = build_spline(seq.t, seq.u)
    u, ud = np.asarray(spline.values), np.asarray(spline.derivs)
    n = len(seq)
    x = np.concatenate([bg0, ba0])

    def rhs(xx, uu, dd):
        out = np.zeros(6)
        if f_g is not None:
            out[:3] = bias_net.forward(f_g, xx[:3], uu, dd)
        if f_a is not None:
            out[3:] = bias_net.forward(f_a, xx[3:], uu, dd)
        return out

    b = np.empty((n, 6))
    b[0] = x
    if f_g is None and f_a is None:
        b[:] = x
    elif method == "euler":
        for k in range(n - 1):
            x = x + (seq.t[k + 1] - seq.t[k]) * rhs(x, u[k], ud[k])
            b[k + 1] = x
    else:
        mids = 0.5 * (seq.t[:-1] + seq.t[1:])
        um, udm = spline.eval_many(mids)
        for k in range(n - 1):
            h = seq.t[k + 1] - seq.t[k]
            k1 = rhs(x, u[k], ud[k])
            k2 = rhs(x + 0.5 * h * k1, um[k], udm[k])
            k3 = rhs(x + 0.5 * h * k2, um[k], udm[k])
            k4 = rhs(x + h * k3, u[k + 1], ud[k + 1])
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            b[k + 1] = x
    if not np.all(np.isfinite(b)):
        raise Diverged("bias integration produced non-finite values")
    gyro = seq.gyro if cal_g is None else bias_net.linear_forward(cal_g, seq.gyro)
    accel = seq.accel if cal_a is None else bias_net.linear_forward(cal_a, seq.accel)
    out = seq.with_measurements(gyro - b[:, :3], accel - b[:, 3:])
    extras = dict(seq.extras)
    extras["bias"] = BiasSeries(b[:, :3].copy(), b[:, 3:].copy())
    return replace(out, extras=extras)
