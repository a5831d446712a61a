"""Command-line entry point: ``imudebias {synth,train,debias,integrate,eval} CONFIG``.

Exit codes: 0 success, 1 bad input (config, files, data), 2 internal
error or diverged training.
"""

import argparse
import logging
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bias_net, dataio, metrics, ode, trainer
from .config import RunConfig
from .errors import BadConfig, Diverged, ImuDebiasError, LengthMismatch, MissingFile

log = logging.getLogger("imudebias")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
CHECKPOINT = "checkpoint.json"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


# Data loading


def _load_sequence(cfg, path):
    """A sequence directory (EuRoC layout or synth output) or a bare IMU CSV."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{path} does not exist")
    if path.is_file():
        return dataio.read_imu_csv(path)
    data = cfg.section("data")
    convention = "tumvi" if cfg.data_kind == "tumvi" else "euroc"
    seq = dataio.load_euroc(path, convention, data.get("imu_file"), data.get("gt_file"),
                            int(data.get("smooth_window", 0)))
    bias_file = path / "bias.csv"
    if bias_file.is_file():
        t, series = dataio.read_bias_csv(bias_file, seq.t0_ns)
        if t.size == len(seq) and np.allclose(t, seq.t, atol=1e-9):
            seq = replace(seq, true_bias=series)
    return seq


def _sequences(cfg, which):
    paths = cfg.sequence_paths(which)
    if paths:
        return [_load_sequence(cfg, p) for p in paths]
    if cfg.data_kind == "synthetic":
        return [dataio.generate_synthetic(cfg.synthetic_config())]
    raise BadConfig(f"data.{which} lists no sequences")


# Commands


def cmd_synth(cfg, args):
    out = Path(args.out) if args.out else cfg.output_dir / "synth"
    seq = dataio.generate_synthetic(cfg.synthetic_config())
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_imu_csv(out / "imu.csv", seq)
    dataio.write_groundtruth_csv(out / "groundtruth.csv", seq)
    dataio.write_bias_csv(out / "bias.csv", seq)
    log.info("wrote %d samples to %s", len(seq), out)
    print(out)
    return out


def _init_models(cfg, mode):
    if mode == "linear":
        return {"gyro": bias_net.LinearCalib.identity("gyro"), "accel": bias_net.LinearCalib.identity("accel")}
    return {s: bias_net.init_params(cfg.net_config(s)) for s in ("gyro", "accel")}


def cmd_train(cfg, args):
    out = Path(args.out) if args.out else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train_config()
    mode = cfg.train_mode
    seqs = _sequences(cfg, "train")
    models = _init_models(cfg, mode)
    trained = {}

    def progress(row):
        log.info("epoch %d train %.6e val %.6e lr %.2e", row["epoch"], row["train_loss"], row["val_loss"], row["lr"])

    for sensor in cfg.stages:
        if mode == "linear":
            stage = "linear"
        else:
            stage = sensor
        frozen = trained.get("gyro") if sensor == "accel" else None
        res = trainer.train(stage, seqs, tc, params=models[sensor], frozen_g=frozen, log=progress)
        trained[sensor] = res.params
        trainer.write_history_csv(out / f"history_{sensor}.csv", res.history)
        log.info("%s stage: best epoch %d, validation loss %.6e", sensor, res.best_epoch, res.best_val)
    bias_net.save(out / CHECKPOINT, trained)
    print(out / CHECKPOINT)
    return trained


def _checkpoint(cfg, args):
    path = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / CHECKPOINT
    if not path.is_file():
        raise MissingFile(f"checkpoint {path} does not exist")
    try:
        return bias_net.load(path)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ImuDebiasError):
            raise
        raise BadConfig(f"{path}: not a valid checkpoint ({exc})") from None


def _target_sequence(cfg, args):
    if args.sequence:
        return _load_sequence(cfg, args.sequence)
    return _sequences(cfg, "test")[0]


def cmd_debias(cfg, args):
    models = _checkpoint(cfg, args)
    seq = _target_sequence(cfg, args)
    b0 = cfg.b0()
    if b0 is None and seq.gt is None:
        raise BadConfig("sequence has no ground truth; set solver.b0_g / solver.b0_a")
    out_seq = trainer.debias(models.get("gyro"), models.get("accel"), seq, b0=b0, window=cfg.bias_window,
                             method=cfg.debias_method, gravity=cfg.gravity)
    out = Path(args.out) if args.out else cfg.output_dir / "debiased"
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_imu_csv(out / "imu.csv", out_seq)
    dataio.write_bias_csv(out / "bias_estimate.csv", replace(out_seq, true_bias=out_seq.extras["bias"]))
    if seq.gt is not None:
        dataio.write_groundtruth_csv(out / "groundtruth.csv", seq)
    print(out / "imu.csv")
    return out_seq


def _parse_init(text):
    vals = [float(x) for x in text.replace(",", " ").split()]
    if len(vals) not in (7, 10):
        raise BadConfig("--init takes qw qx qy qz px py pz [vx vy vz]")
    q = np.array(vals[:4])
    if not np.linalg.norm(q) > 0:
        raise BadConfig("--init quaternion must be non-zero")
    R = dataio.quat_wxyz_to_matrix(q / np.linalg.norm(q))
    v = vals[7:10] if len(vals) == 10 else (0.0, 0.0, 0.0)
    return R, np.array(vals[4:7]), np.array(v)


def cmd_integrate(cfg, args):
    seq = _load_sequence(cfg, args.imu) if args.imu else _sequences(cfg, "test")[0]
    if args.init:
        R0, p0, v0 = _parse_init(args.init)
    elif args.gt or seq.gt is not None:
        gt = _load_sequence(cfg, args.gt).gt if args.gt else seq.gt
        if gt is None:
            raise BadConfig(f"{args.gt} has no ground truth for the initial pose")
        R0, p0, v0 = gt.R[0], gt.p[0], gt.v[0]
    else:
        R0, p0, v0 = np.eye(3), np.zeros(3), np.zeros(3)
    method = args.method or cfg.method
    init = ode.CoupledState.from_pose(R0, v0, p0)
    path = ode.integrate_full(None, None, seq.control(), init, cfg.gravity, ode.TimeGrid(seq.t), method,
                              cfg.threshold)
    out = Path(args.out) if args.out else cfg.output_dir / "trajectory.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_tum(out, path.t, path.R, path.p)
    print(out)
    return path


def _read_trajectory(cfg, path):
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{path} does not exist")
    if path.is_dir():
        seq = _load_sequence(cfg, path)
        if seq.gt is None:
            raise BadConfig(f"{path} has no ground truth")
        return metrics.Trajectory(seq.t, seq.gt.R, seq.gt.p, seq.gt.v)
    t, R, p = dataio.read_tum(path)
    return metrics.Trajectory(t, R, p)


def _associate(est, gt, tol=1e-6):
    j = np.clip(np.searchsorted(gt.t, est.t), 0, len(gt) - 1)
    jl = np.clip(j - 1, 0, len(gt) - 1)
    j = np.where(np.abs(gt.t[jl] - est.t) < np.abs(gt.t[j] - est.t), jl, j)
    ok = np.abs(gt.t[j] - est.t) <= tol
    if not np.any(ok):
        raise LengthMismatch("no common timestamps between estimate and ground truth")
    i = np.nonzero(ok)[0]
    e = metrics.Trajectory(est.t[i], est.R[i], est.p[i])
    g = metrics.Trajectory(gt.t[j[i]], gt.R[j[i]], gt.p[j[i]])
    return e, g


def cmd_eval(cfg, args):
    if not args.est or not args.gt:
        raise BadConfig("eval needs --est and --gt")
    est, gt = _associate(_read_trajectory(cfg, args.est), _read_trajectory(cfg, args.gt))
    report = metrics.evaluate(est, gt, cfg.distances, cfg.alignment, cfg.metric_stride)
    out = Path(args.out) if args.out else cfg.output_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    (out / "report.txt").write_text(report.pretty())
    metrics.write_error_csv(out / "errors.csv", est, gt, cfg.alignment)
    sys.stdout.write(report.pretty())
    return report


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "debias": cmd_debias,
    "integrate": cmd_integrate,
    "eval": cmd_eval,
}


def build_parser():
    p = _Parser(prog="imudebias", description="Learn and remove IMU bias dynamics.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(name, help_text):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("config", help="run config (TOML)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.epochs=10")
        s.add_argument("-o", "--out", help="output path (defaults under output_dir)")
        return s

    common("synth", "write a synthetic sequence")
    common("train", "train the bias models")
    s = common("debias", "remove the integrated bias from a sequence")
    s.add_argument("--checkpoint")
    s.add_argument("--sequence", help="sequence directory or IMU CSV (default: first data.test entry)")
    s = common("integrate", "strapdown-integrate an IMU stream")
    s.add_argument("--imu", help="IMU CSV or sequence directory")
    s.add_argument("--gt", help="sequence whose first ground-truth pose is the initial state")
    s.add_argument("--init", help="initial state: qw qx qy qz px py pz [vx vy vz]")
    s.add_argument("--method", choices=ode.METHODS)
    s = common("eval", "compute trajectory metrics")
    s.add_argument("--est", help="estimated trajectory (TUM)")
    s.add_argument("--gt", help="ground truth (TUM file or sequence directory)")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.set)
        COMMANDS[args.command](cfg, args)
    except Diverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except ImuDebiasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
