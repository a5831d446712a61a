"""Run configuration files (TOML).

A run file has a few top-level keys and one table per concern::

    seed = 0
    output_dir = "runs/demo"

    [data]        # where sequences come from
    [synthetic]   # SyntheticConfig fields, with [synthetic.gyro_bias] etc.
    [train]       # TrainConfig fields plus ``mode`` ("neural" or "linear")
    [net.gyro]    # NetConfig fields per sensor
    [net.accel]
    [solver]      # integration and debiasing options
    [metrics]     # distances, alignment, pair stride

Command-line ``--set section.key=value`` overrides are parsed as TOML
values and applied on top of the file.
"""

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from . import bias_net, dataio, metrics, ode, trainer
from .errors import BadConfig, MissingFile

SECTIONS = {
    "data": {"kind", "train", "test", "convention", "smooth_window", "imu_file", "gt_file"},
    "synthetic": {f.name for f in fields(dataio.SyntheticConfig)},
    "train": {f.name for f in fields(trainer.TrainConfig)} | {"mode", "stages"},
    "net": {"gyro", "accel"},
    "solver": {"method", "debias_method", "threshold", "bias_window", "b0_g", "b0_a", "gravity"},
    "metrics": {"distances", "alignment", "stride"},
}
TOP_LEVEL = {"seed", "output_dir"}
NET_KEYS = {f.name for f in fields(bias_net.NetConfig)} - {"sensor"}
DATA_KINDS = ("synthetic", "euroc", "tumvi")
TRAIN_MODES = ("neural", "linear")


def _parse_value(text):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        # Bare words are taken as strings.
        return text


def apply_override(doc, item):
    """Apply one ``a.b.c=value`` override to a nested dict in place."""
    if "=" not in item:
        raise BadConfig(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    parts = [p.strip() for p in key.strip().split(".") if p.strip()]
    if not parts:
        raise BadConfig(f"override {item!r} has an empty key")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise BadConfig(f"override {item!r}: {p!r} is not a table")
    node[parts[-1]] = _parse_value(value.strip())
    return doc


def _validate(doc):
    for key, value in doc.items():
        if key in TOP_LEVEL:
            continue
        if key not in SECTIONS:
            raise BadConfig(f"unknown config section or key {key!r}")
        if not isinstance(value, dict):
            raise BadConfig(f"[{key}] must be a table")
        allowed = SECTIONS[key]
        for sub, subval in value.items():
            if sub not in allowed:
                raise BadConfig(f"unknown key {key}.{sub}")
            if key == "net":
                if not isinstance(subval, dict):
                    raise BadConfig(f"[net.{sub}] must be a table")
                bad = set(subval) - NET_KEYS
                if bad:
                    raise BadConfig(f"unknown key(s) in [net.{sub}]: {', '.join(sorted(bad))}")


@dataclass
class RunConfig:
    doc: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path, overrides=()):
        path = Path(path)
        if not path.is_file():
            raise MissingFile(f"config file {path} does not exist")
        try:
            doc = tomli.loads(path.read_text())
        except tomli.TOMLDecodeError as exc:
            raise BadConfig(f"{path}: {exc}") from None
        return cls.from_dict(doc, overrides, path.parent)

    @classmethod
    def from_dict(cls, doc, overrides=(), base_dir=None):
        doc = copy.deepcopy(doc)
        for item in overrides:
            apply_override(doc, item)
        _validate(doc)
        return cls(doc, Path(base_dir) if base_dir is not None else Path.cwd())

    def section(self, name):
        return dict(self.doc.get(name, {}))

    @property
    def seed(self):
        return int(self.doc.get("seed", 0))

    def path(self, value):
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self):
        return self.path(self.doc.get("output_dir", "out"))

    # Typed views

    def synthetic_config(self):
        s = self.section("synthetic")
        s.setdefault("seed", self.seed)
        try:
            return dataio.SyntheticConfig(**_tuples(s))
        except TypeError as exc:
            raise BadConfig(f"[synthetic]: {exc}") from None

    def train_config(self):
        s = self.section("train")
        s.pop("mode", None)
        s.pop("stages", None)
        s.setdefault("seed", self.seed)
        if "gravity" not in s and "gravity" in self.section("solver"):
            s["gravity"] = self.section("solver")["gravity"]
        try:
            return trainer.TrainConfig(**_tuples(s))
        except TypeError as exc:
            raise BadConfig(f"[train]: {exc}") from None

    @property
    def train_mode(self):
        mode = self.section("train").get("mode", "neural")
        if mode not in TRAIN_MODES:
            raise BadConfig(f"train.mode must be one of {TRAIN_MODES}, got {mode!r}")
        return mode

    @property
    def stages(self):
        stages = list(self.section("train").get("stages", ["gyro", "accel"]))
        if not stages or any(s not in ("gyro", "accel") for s in stages) or len(set(stages)) != len(stages):
            raise BadConfig(f"train.stages must be a subset of ['gyro', 'accel'], got {stages!r}")
        if stages == ["accel", "gyro"]:
            raise BadConfig("the gyro stage must run before the accel stage")
        return stages

    def net_config(self, sensor):
        s = dict(self.section("net").get(sensor, {}))
        s.setdefault("seed", self.seed + (0 if sensor == "gyro" else 1))
        return bias_net.NetConfig(sensor=sensor, **_tuples(s))

    @property
    def gravity(self):
        g = self.section("solver").get("gravity", list(dataio.GRAVITY))
        if len(g) != 3:
            raise BadConfig("solver.gravity must have 3 entries")
        return tuple(float(x) for x in g)

    @property
    def method(self):
        m = self.section("solver").get("method", "rk4")
        if m not in ode.METHODS:
            raise BadConfig(f"solver.method must be one of {ode.METHODS}")
        return m

    @property
    def debias_method(self):
        m = self.section("solver").get("debias_method", "euler")
        if m not in ode.METHODS:
            raise BadConfig(f"solver.debias_method must be one of {ode.METHODS}")
        return m

    @property
    def threshold(self):
        t = float(self.section("solver").get("threshold", ode.DEFAULT_THRESHOLD))
        if not t > 0:
            raise BadConfig("solver.threshold must be positive")
        return t

    @property
    def bias_window(self):
        w = int(self.section("solver").get("bias_window", 1))
        if w < 1:
            raise BadConfig("solver.bias_window must be >= 1")
        return w

    def b0(self):
        s = self.section("solver")
        if "b0_g" not in s and "b0_a" not in s:
            return None
        return (tuple(s.get("b0_g", (0.0, 0.0, 0.0))), tuple(s.get("b0_a", (0.0, 0.0, 0.0))))

    @property
    def distances(self):
        d = self.section("metrics").get("distances", list(metrics.DEFAULT_DISTANCES))
        if not d or any(not float(x) > 0 for x in d):
            raise BadConfig("metrics.distances must be positive")
        return [float(x) for x in d]

    @property
    def alignment(self):
        a = self.section("metrics").get("alignment", "first_pose")
        if a not in metrics.ALIGNMENTS:
            raise BadConfig(f"metrics.alignment must be one of {metrics.ALIGNMENTS}")
        return a

    @property
    def metric_stride(self):
        return int(self.section("metrics").get("stride", 1))

    @property
    def data_kind(self):
        kind = self.section("data").get("kind", "synthetic")
        if kind not in DATA_KINDS:
            raise BadConfig(f"data.kind must be one of {DATA_KINDS}, got {kind!r}")
        return kind

    def sequence_paths(self, which):
        paths = self.section("data").get(which, [])
        if isinstance(paths, str):
            paths = [paths]
        return [self.path(p) for p in paths]


def _tuples(d):
    """TOML arrays become tuples (dataclass fields use tuples); nested tables stay dicts."""
    out = {}
    for k, v in d.items():
        if isinstance(v, list):
            out[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        else:
            out[k] = v
    return out
