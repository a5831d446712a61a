import numpy as np
import pytest

from imudebias import bias_net
from imudebias.bias_net import LinearCalib, NetConfig
from imudebias.errors import BadConfig, ShapeMismatch


def inputs(seed, shape=()):
    r = np.random.default_rng(seed)
    b = r.normal(size=shape + (3,)) * 0.03
    u = r.normal(size=shape + (6,))
    ud = r.normal(size=shape + (6,)) * 5
    return b, u, ud


def test_init_deterministic_and_seed_dependent():
    a = bias_net.init_params(NetConfig("gyro", seed=3))
    b = bias_net.init_params(NetConfig("gyro", seed=3))
    c = bias_net.init_params(NetConfig("gyro", seed=4))
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())


def test_bad_configs():
    with pytest.raises(BadConfig):
        NetConfig("gyro", widths=())
    with pytest.raises(BadConfig):
        NetConfig("gyro", widths=(0,))
    with pytest.raises(BadConfig):
        NetConfig("magnetometer")
    with pytest.raises(BadConfig):
        NetConfig("gyro", activation="relu")
    with pytest.raises(BadConfig):
        NetConfig("gyro", bias_scale=-1.0)


def test_fresh_output_small():
    for sensor in ("gyro", "accel"):
        cfg = NetConfig(sensor)
        p = bias_net.init_params(cfg)
        b, u, ud = inputs(0, (1000,))
        out = bias_net.forward(p, b, u * cfg.u_scale, ud * cfg.udot_scale)
        assert np.max(np.linalg.norm(out, axis=-1)) <= 0.1 * cfg.bias_scale


def test_zero_final_layer_gives_zero_field():
    p = bias_net.init_params(NetConfig("gyro"))
    p.weights[-1][:] = 0
    p.biases[-1][:] = 0
    assert np.array_equal(bias_net.forward(p, *inputs(1, (20,))), np.zeros((20, 3)))


def test_residual_identity_with_zero_blocks():
    cfg = NetConfig("accel", widths=(12, 12), final_layer_scale=1.0)
    p = bias_net.init_params(cfg)
    for w, c in zip(p.weights[:-1], p.biases[:-1]):
        w[:] = 0
        c[:] = 0
    b, u, ud = inputs(2)
    x = np.concatenate([b / cfg.bias_scale, u[3:] / cfg.u_scale, ud[3:] / cfg.udot_scale])
    z = np.concatenate([x, np.zeros(3)])  # 9 inputs padded to width 12
    expected = cfg.rate_scale * (p.weights[-1] @ z + p.biases[-1])
    np.testing.assert_allclose(bias_net.forward(p, b, u, ud), expected, rtol=1e-14)


def test_skip_truncates_when_narrowing():
    cfg = NetConfig("gyro", widths=(4,), final_layer_scale=1.0)
    p = bias_net.init_params(cfg)
    p.weights[0][:] = 0
    p.biases[0][:] = 0
    b, u, ud = inputs(3)
    x = bias_net.normalized_input(p, b, u, ud)
    expected = cfg.rate_scale * (p.weights[-1] @ x[:4] + p.biases[-1])
    np.testing.assert_allclose(bias_net.forward(p, b, u, ud), expected, rtol=1e-14)


def test_sensor_channel_selection():
    p = bias_net.init_params(NetConfig("gyro", final_layer_scale=1.0))
    b, u, ud = inputs(4)
    np.testing.assert_array_equal(bias_net.forward(p, b, u, ud), bias_net.forward(p, b, u[:3], ud[:3]))
    q = bias_net.init_params(NetConfig("accel", final_layer_scale=1.0))
    np.testing.assert_array_equal(bias_net.forward(q, b, u, ud), bias_net.forward(q, b, u[3:], ud[3:]))
    with pytest.raises(ShapeMismatch):
        bias_net.forward(p, b, u[:2], ud[:2])


def test_full_input_option():
    cfg = NetConfig("gyro", full_input=True, final_layer_scale=1.0)
    p = bias_net.init_params(cfg)
    assert p.weights[0].shape[1] == 15
    b, u, ud = inputs(5)
    out = bias_net.forward(p, b, u, ud)
    u2 = u.copy()
    u2[3:] += 1.0
    assert not np.allclose(out, bias_net.forward(p, b, u2, ud))


def _fd_check(p, b, u, ud, up, rel, floor=1e-12):
    grads, gb = bias_net.forward_grad(p, b, u, ud, up)
    x = p.flat()
    g = grads.flat()
    eps = 1e-5  # smaller steps hit roundoff on grads near 1e-6
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        fd = (up @ bias_net.forward(p.with_flat(xp), b, u, ud) - up @ bias_net.forward(p.with_flat(xm), b, u, ud)) / (2 * eps)
        assert abs(fd - g[i]) <= rel * max(abs(fd), abs(g[i])) + floor, i
    for j in range(3):
        e = np.zeros(3)
        e[j] = eps
        fd = (up @ bias_net.forward(p, b + e, u, ud) - up @ bias_net.forward(p, b - e, u, ud)) / (2 * eps)
        assert abs(fd - gb[j]) <= rel * max(abs(fd), abs(gb[j])) + floor


def test_forward_grad_matches_finite_differences():
    for seed in range(5):
        cfg = NetConfig("gyro", widths=(8,), seed=seed, rate_scale=1.0, final_layer_scale=1.0)
        p = bias_net.init_params(cfg)
        b, u, ud = inputs(seed)
        up = np.random.default_rng(seed).normal(size=3)
        _fd_check(p, b, u, ud, up, 1e-4)


def test_forward_grad_random_configurations():
    r = np.random.default_rng(11)
    for k in range(100):
        depth = r.integers(1, 4)
        widths = tuple(int(w) for w in r.integers(1, 12, size=depth))
        sensor = ("gyro", "accel")[k % 2]
        cfg = NetConfig(sensor, widths=widths, seed=k, rate_scale=1.0, final_layer_scale=1.0)
        p = bias_net.init_params(cfg)
        b, u, ud = inputs(100 + k)
        b = b * (cfg.bias_scale / 0.05)
        # Deep random nets have entries near 1e-8 where the central difference carries ~1e-11 roundoff.
        _fd_check(p, b, u * cfg.u_scale, ud * cfg.udot_scale, r.normal(size=3), 1e-4, floor=1e-9)


def test_forward_grad_zero_upstream():
    p = bias_net.init_params(NetConfig("gyro"))
    grads, gb = bias_net.forward_grad(p, *inputs(6), np.zeros(3))
    assert np.all(grads.flat() == 0) and np.all(gb == 0)


def test_directional_derivative():
    cfg = NetConfig("accel", widths=(16, 8), rate_scale=1.0, final_layer_scale=1.0)
    p = bias_net.init_params(cfg)
    b, u, ud = inputs(7)
    d = np.random.default_rng(0).normal(size=p.size)
    up = np.ones(3)
    grads, _ = bias_net.forward_grad(p, b * 10, u * 10, ud * 100, up)
    eps = 1e-6
    x = p.flat()
    fd = (up @ bias_net.forward(p.with_flat(x + eps * d), b * 10, u * 10, ud * 100)
          - up @ bias_net.forward(p.with_flat(x - eps * d), b * 10, u * 10, ud * 100)) / (2 * eps)
    assert abs(fd - grads.flat() @ d) <= 1e-5 * abs(fd)


def test_batched_backward_sums_over_batch():
    p = bias_net.init_params(NetConfig("gyro", widths=(8,), final_layer_scale=1.0))
    b, u, ud = inputs(8, (5,))
    up = np.random.default_rng(1).normal(size=(5, 3))
    total, gb = bias_net.forward_grad(p, b, u, ud, up)
    acc = np.zeros(p.size)
    for i in range(5):
        g, gbi = bias_net.forward_grad(p, b[i], u[i], ud[i], up[i])
        acc += g.flat()
        np.testing.assert_allclose(gb[i], gbi, rtol=1e-13)
    np.testing.assert_allclose(total.flat(), acc, rtol=1e-12, atol=1e-18)


def test_scale_equivariance():
    cfg = NetConfig("gyro", final_layer_scale=1.0)
    p = bias_net.init_params(cfg)
    b, u, ud = inputs(9)
    k = 7.3
    cfg2 = NetConfig("gyro", seed=cfg.seed, u_scale=cfg.u_scale * k, udot_scale=cfg.udot_scale * k,
                     bias_scale=cfg.bias_scale * k, rate_scale=cfg.rate_scale, final_layer_scale=1.0)
    p2 = bias_net.MlpParams(cfg2, p.weights, p.biases)
    np.testing.assert_allclose(bias_net.forward(p2, b * k, u * k, ud * k), bias_net.forward(p, b, u, ud),
                               rtol=0, atol=1e-12)


def test_deterministic_forward():
    p = bias_net.init_params(NetConfig("accel"))
    x = inputs(10, (50,))
    assert np.array_equal(bias_net.forward(p, *x), bias_net.forward(p, *x))


def test_linear_forward():
    u = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(bias_net.linear_forward(LinearCalib.identity(), u), u)
    c = np.array([0.1, 0.2, 0.3])
    np.testing.assert_array_equal(bias_net.linear_forward(LinearCalib(np.eye(3), c), u), u + c)
    A = np.array([[1.0, 0.02, 0.0], [-0.01, 0.98, 0.03], [0.0, 0.01, 1.05]])
    manual = np.array([sum(A[i, j] * u[j] for j in range(3)) + c[i] for i in range(3)])
    np.testing.assert_allclose(bias_net.linear_forward(LinearCalib(A, c), u), manual, rtol=1e-15)


def test_flat_roundtrip():
    p = bias_net.init_params(NetConfig("gyro", widths=(5, 7)))
    q = p.with_flat(p.flat())
    assert np.array_equal(q.flat(), p.flat())
    with pytest.raises(ShapeMismatch):
        p.with_flat(np.zeros(3))
    lc = LinearCalib(np.arange(9.0).reshape(3, 3), np.ones(3), "accel")
    assert np.array_equal(lc.with_flat(lc.flat()).flat(), lc.flat())


def test_serialisation_bit_exact(tmp_path):
    p = bias_net.init_params(NetConfig("gyro", widths=(5, 7), seed=2))
    a = bias_net.init_params(NetConfig("accel", seed=9, full_input=True))
    lc = LinearCalib(np.random.default_rng(0).normal(size=(3, 3)), np.array([1e-300, -0.0, np.pi]), "accel")
    path = tmp_path / "ck.json"
    bias_net.save(path, {"gyro": p, "accel": a, "lin": lc})
    back = bias_net.load(path)
    assert back["gyro"].config == p.config
    assert back["accel"].config == a.config
    assert np.array_equal(back["gyro"].flat(), p.flat())
    assert np.array_equal(back["accel"].flat(), a.flat())
    assert np.array_equal(back["lin"].flat(), lc.flat())
    assert back["lin"].sensor == "accel"
    assert bias_net.dumps(back) == bias_net.dumps({"gyro": p, "accel": a, "lin": lc})


def test_load_rejects_foreign_files():
    with pytest.raises(BadConfig):
        bias_net.loads('{"format": "other", "version": 1, "models": {}}')
    with pytest.raises(BadConfig):
        bias_net.loads('{"format": "imudebias-params", "version": 99, "models": {}}')
