"""Residual MLP bias fields and the linear calibration baseline.

A field maps ``(bias, measurement, measurement rate)`` to the bias rate.
Inputs are divided by fixed per-channel scales; every hidden block is
``z <- P z + tanh(W z + c)`` where ``P`` zero-pads or truncates ``z`` to
the block width.  The output layer is affine, multiplied by ``rate_scale``.

Reverse mode is written out by hand (``forward_cached`` / ``backward``),
batched over any leading axes.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BadConfig, ShapeMismatch
from .rng import substream

FORMAT_NAME = "imudebias-params"
FORMAT_VERSION = 1

# (measurement, measurement rate, bias) scales per sensor.
DEFAULT_SCALES = {
    "gyro": (1.0, 10.0, 0.05),
    "accel": (10.0, 100.0, 0.5),
}
_SLICES = {"gyro": slice(0, 3), "accel": slice(3, 6)}
# Default output scale is bias_scale / RATE_TIME: biases move over tens of
# seconds, and a larger scale lets noise-driven updates integrate into drift.
RATE_TIME = 100.0


@dataclass(frozen=True)
class NetConfig:
    sensor: str = "gyro"
    widths: tuple = (32, 32)
    activation: str = "tanh"
    seed: int = 0
    u_scale: float = None
    udot_scale: float = None
    bias_scale: float = None
    rate_scale: float = None
    # Feed both gyro and accel channels to the field instead of one sensor.
    full_input: bool = False
    final_layer_scale: float = 1e-2

    def __post_init__(self):
        if self.sensor not in DEFAULT_SCALES:
            raise BadConfig(f"sensor must be 'gyro' or 'accel', got {self.sensor!r}")
        widths = tuple(int(w) for w in self.widths)
        if not widths or any(w < 1 for w in widths):
            raise BadConfig(f"hidden widths must be >= 1, got {self.widths!r}")
        if self.activation != "tanh":
            raise BadConfig(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "widths", widths)
        us, uds, bs = DEFAULT_SCALES[self.sensor]
        for name, default in (("u_scale", us), ("udot_scale", uds), ("bias_scale", bs), ("rate_scale", None)):
            value = getattr(self, name)
            if value is None:
                value = self.bias_scale / RATE_TIME if default is None else default
            value = float(value)
            if not value > 0:
                raise BadConfig(f"{name} must be positive")
            object.__setattr__(self, name, value)

    @property
    def in_dim(self):
        return 3 + 2 * self.n_channels

    @property
    def n_channels(self):
        return 6 if self.full_input else 3

    def input_scales(self):
        if self.full_input:
            # Both sensors on their default scales.
            u = np.repeat([DEFAULT_SCALES["gyro"][0], DEFAULT_SCALES["accel"][0]], 3)
            ud = np.repeat([DEFAULT_SCALES["gyro"][1], DEFAULT_SCALES["accel"][1]], 3)
        else:
            u = np.full(3, self.u_scale)
            ud = np.full(3, self.udot_scale)
        return np.concatenate([np.full(3, self.bias_scale), u, ud])

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class MlpParams:
    config: NetConfig
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    kind = "mlp"

    def arrays(self):
        out = []
        for w, c in zip(self.weights, self.biases):
            out += [w, c]
        return out

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.size:
            raise ShapeMismatch(f"expected {self.size} parameters, got {vec.size}")
        weights, biases, k = [], [], 0
        for w, c in zip(self.weights, self.biases):
            weights.append(vec[k : k + w.size].reshape(w.shape).copy())
            k += w.size
            biases.append(vec[k : k + c.size].reshape(c.shape).copy())
            k += c.size
        return MlpParams(self.config, weights, biases)

    @property
    def size(self):
        return sum(a.size for a in self.arrays())

    def copy(self):
        return self.with_flat(self.flat())

    def __call__(self, b, u, udot):
        return forward(self, b, u, udot)


@dataclass
class LinearCalib:
    """``u_hat = A u + b`` for one sensor, with constant parameters."""

    A: np.ndarray
    b: np.ndarray
    sensor: str = "gyro"

    kind = "linear"

    @classmethod
    def identity(cls, sensor="gyro"):
        return cls(np.eye(3), np.zeros(3), sensor)

    def flat(self):
        return np.concatenate([np.asarray(self.A, float).ravel(), np.asarray(self.b, float).ravel()])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.size != 12:
            raise ShapeMismatch(f"expected 12 parameters, got {vec.size}")
        return LinearCalib(vec[:9].reshape(3, 3).copy(), vec[9:].copy(), self.sensor)

    @property
    def size(self):
        return 12

    def copy(self):
        return self.with_flat(self.flat())


def linear_forward(calib, u):
    return np.asarray(u, float) @ np.asarray(calib.A, float).T + calib.b


def init_params(cfg):
    """Deterministic Glorot-uniform init; the output layer is shrunk so the
    initial field is close to zero."""
    if not isinstance(cfg, NetConfig):
        raise BadConfig("init_params expects a NetConfig")
    rng = substream(cfg.seed, "init")
    dims = [cfg.in_dim, *cfg.widths]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    fan_in = dims[-1]
    lim = np.sqrt(6.0 / (fan_in + 3))
    weights.append(cfg.final_layer_scale * rng.uniform(-lim, lim, size=(3, fan_in)))
    biases.append(np.zeros(3))
    return MlpParams(cfg, weights, biases)


def _select(cfg, u):
    u = np.asarray(u, dtype=float)
    if u.shape[-1] == cfg.n_channels:
        return u
    if u.shape[-1] == 6 and not cfg.full_input:
        return u[..., _SLICES[cfg.sensor]]
    raise ShapeMismatch(f"field expects {cfg.n_channels} measurement channels, got {u.shape[-1]}")


def _skip(z, width):
    d = z.shape[-1]
    if d == width:
        return z
    if d > width:
        return z[..., :width]
    pad = np.zeros(z.shape[:-1] + (width - d,))
    return np.concatenate([z, pad], axis=-1)


def _skip_back(g, d):
    w = g.shape[-1]
    if d == w:
        return g
    if d < w:
        return g[..., :d]
    pad = np.zeros(g.shape[:-1] + (d - w,))
    return np.concatenate([g, pad], axis=-1)


def normalized_input(params, b, u, udot):
    cfg = params.config
    x = np.concatenate(
        [np.asarray(b, float), _select(cfg, u), _select(cfg, udot)],
        axis=-1,
    )
    return x / cfg.input_scales()


def forward_cached(params, b, u, udot):
    x = normalized_input(params, b, u, udot)
    zs, acts = [x], []
    z = x
    for w, c in zip(params.weights[:-1], params.biases[:-1]):
        a = np.tanh(z @ w.T + c)
        z = _skip(z, w.shape[0]) + a
        acts.append(a)
        zs.append(z)
    out = params.config.rate_scale * (z @ params.weights[-1].T + params.biases[-1])
    return out, (zs, acts)


def forward(params, b, u, udot):
    return forward_cached(params, b, u, udot)[0]


def backward(params, cache, upstream):
    """Reverse pass for :func:`forward_cached`.

    Returns ``(grad_arrays, grad_x)`` where ``grad_arrays`` follows
    :meth:`MlpParams.arrays` order and is summed over the batch, and
    ``grad_x`` is the gradient w.r.t. the normalised input.
    """
    zs, acts = cache
    g = params.config.rate_scale * np.asarray(upstream, float)
    lead = g.shape[:-1]
    g2 = g.reshape(-1, 3)
    z_last = zs[-1].reshape(-1, zs[-1].shape[-1])
    grads = [None] * (2 * len(params.weights))
    grads[-2] = g2.T @ z_last
    grads[-1] = g2.sum(axis=0)
    gz = g2 @ params.weights[-1]
    for i in range(len(params.weights) - 2, -1, -1):
        a = acts[i].reshape(-1, acts[i].shape[-1])
        z_in = zs[i].reshape(-1, zs[i].shape[-1])
        gpre = gz * (1.0 - a * a)
        grads[2 * i] = gpre.T @ z_in
        grads[2 * i + 1] = gpre.sum(axis=0)
        gz = _skip_back(gz, z_in.shape[-1]) + gpre @ params.weights[i]
    return grads, gz.reshape(lead + (gz.shape[-1],))


def forward_grad(params, b, u, udot, upstream):
    """Gradients of ``<upstream, forward(params, b, u, udot)>``.

    Returns ``(grad_params, grad_b)``; ``grad_params`` is an ``MlpParams``
    holding the gradient arrays.
    """
    _, cache = forward_cached(params, b, u, udot)
    grads, gx = backward(params, cache, upstream)
    grad_b = gx[..., :3] / params.config.bias_scale
    return MlpParams(params.config, grads[0::2], grads[1::2]), grad_b


def zero_field(b, u, udot):
    return np.zeros_like(np.asarray(b, dtype=float))


# Serialisation


def _encode(model):
    if isinstance(model, MlpParams):
        header = {"kind": "mlp", "config": model.config.to_dict()}
        arrays = model.arrays()
    elif isinstance(model, LinearCalib):
        header = {"kind": "linear", "sensor": model.sensor}
        arrays = [np.asarray(model.A, float), np.asarray(model.b, float)]
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")
    header["shapes"] = [list(a.shape) for a in arrays]
    header["data"] = [float(x).hex() for a in arrays for x in a.ravel()]
    return header


def _decode(entry):
    flat = np.array([float.fromhex(s) for s in entry["data"]], dtype=float)
    arrays, k = [], 0
    for shape in entry["shapes"]:
        n = int(np.prod(shape)) if shape else 1
        arrays.append(flat[k : k + n].reshape(shape))
        k += n
    if entry["kind"] == "linear":
        return LinearCalib(arrays[0], arrays[1], entry.get("sensor", "gyro"))
    if entry["kind"] == "mlp":
        cfg = entry["config"]
        cfg["widths"] = tuple(cfg["widths"])
        return MlpParams(NetConfig(**cfg), arrays[0::2], arrays[1::2])
    raise BadConfig(f"unknown model kind {entry['kind']!r}")


def dumps(models):
    """Serialise a ``{name: MlpParams | LinearCalib}`` mapping to text."""
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "models": {name: _encode(m) for name, m in models.items()},
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def loads(text):
    doc = json.loads(text)
    if doc.get("format") != FORMAT_NAME:
        raise BadConfig("not an imudebias parameter file")
    if doc.get("version") != FORMAT_VERSION:
        raise BadConfig(f"unsupported parameter file version {doc.get('version')!r}")
    return {name: _decode(entry) for name, entry in doc["models"].items()}


def save(path, models):
    with open(path, "w") as fh:
        fh.write(dumps(models))


def load(path):
    with open(path) as fh:
        return loads(fh.read())
