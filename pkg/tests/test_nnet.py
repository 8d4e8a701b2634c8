import numpy as np
import pytest

from gazekit import nnet
from gazekit.nnet import ConvSpec, GazeNet, NetConfig
from gazekit.train import loss_and_grad


def conv_ref(x, w, b, stride, pad):
    """Naive nested-loop convolution oracle (float64)."""
    x = x.astype(np.float64)
    w = w.astype(np.float64)
    n_, ci, h, width = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (width + 2 * pad - kw) // stride + 1
    y = np.zeros((n_, co, ho, wo))
    for n in range(n_):
        for o in range(co):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride + ky - pad
                                ix = ox * stride + kx - pad
                                if 0 <= iy < h and 0 <= ix < width:
                                    acc += x[n, c, iy, ix] * w[o, c, ky, kx]
                    y[n, o, oy, ox] = acc + b[o]
    return y


def pool_ref(x, k, stride):
    n_, c_, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    y = np.zeros((n_, c_, ho, wo), dtype=x.dtype)
    for n in range(n_):
        for c in range(c_):
            for oy in range(ho):
                for ox in range(wo):
                    y[n, c, oy, ox] = x[
                        n, c, oy * stride : oy * stride + k, ox * stride : ox * stride + k
                    ].max()
    return y


def forward_ref(net, x, heads, cluster_id):
    """Independent direct-loop forward pass using the net's parameters."""
    cfg, p = net.config, net.params
    h = x.astype(np.float64)
    conv3 = None
    for i, cs in enumerate(cfg.convs, start=1):
        h = conv_ref(h, p[f"conv{i}.w"], p[f"conv{i}.b"].astype(np.float64), cs.stride, cs.pad)
        h = np.maximum(h, 0)
        if i == 3:
            conv3 = h
    h = pool_ref(h, cfg.pool, cfg.pool_stride)
    flat = h.reshape(x.shape[0], -1)
    z6 = flat @ p["fc6.w"].astype(np.float64) + p["fc6.b"]
    if cfg.use_skip:
        z6 = z6 + conv3.mean(axis=(2, 3)) @ p["skip.w"].astype(np.float64)
    f6 = np.maximum(z6, 0)
    f7 = np.maximum(f6 @ p[f"fc7.{cluster_id}.w"] + p[f"fc7.{cluster_id}.b"], 0)
    if cfg.head_pose_input:
        f7 = np.concatenate([f7, heads.astype(np.float64)], axis=1)
    return f7 @ p[f"fc8.{cluster_id}.w"] + p[f"fc8.{cluster_id}.b"]


def tiny_config(**overrides):
    base = dict(
        input_w=12,
        input_h=8,
        input_channels=1,
        convs=(
            ConvSpec(3, 2, 1, 1),
            ConvSpec(3, 3, 2, 1),
            ConvSpec(3, 3, 1, 1),
            ConvSpec(1, 4, 1, 0),
            ConvSpec(3, 2, 1, 1),
        ),
        pool=2,
        pool_stride=2,
        fc6=5,
        fc7=4,
        k=3,
        use_skip=True,
        head_pose_input=True,
    )
    base.update(overrides)
    return NetConfig(**base)


class TestNetConfig:
    def test_requires_five_convs(self):
        with pytest.raises(ValueError):
            NetConfig(convs=(ConvSpec(3, 4),) * 4)

    def test_rejects_collapsing_stack(self):
        with pytest.raises(ValueError):
            NetConfig(
                input_w=16, input_h=10,
                convs=(ConvSpec(7, 8, 2, 0),) * 5,
            )

    def test_dict_round_trip(self):
        cfg = tiny_config()
        assert NetConfig.from_dict(cfg.to_dict()) == cfg

    def test_param_shapes_heads(self):
        cfg = tiny_config(k=3)
        shapes = cfg.param_shapes()
        for k in range(3):
            assert f"fc7.{k}.w" in shapes and f"fc8.{k}.w" in shapes
        assert shapes["fc8.0.w"] == (cfg.fc7 + 2, 2)


class TestForward:
    def test_zero_weights_give_zero_output(self):
        cfg = tiny_config()
        net = GazeNet(cfg, {n: np.zeros(s, np.float32) for n, s in cfg.param_shapes().items()})
        out = net.forward_batch(
            np.random.default_rng(0).standard_normal((4, 1, 8, 12)).astype(np.float32),
            np.zeros((4, 2), np.float32),
            1,
        )
        assert np.array_equal(out, np.zeros((4, 2), np.float32))

    def test_hand_evaluated_affine_chain(self):
        # 1x1 convs with unit kernels on a single-pixel input: the whole
        # net becomes a chain of scalar affine maps, evaluated by hand.
        cfg = NetConfig(
            input_w=1, input_h=1,
            convs=tuple(ConvSpec(1, 1, 1, 0) for _ in range(5)),
            pool=1, pool_stride=1, fc6=1, fc7=1, k=1,
            use_skip=False, head_pose_input=False,
        )
        params = {n: np.zeros(s, np.float32) for n, s in cfg.param_shapes().items()}
        x0 = 0.5
        for i in range(1, 6):
            params[f"conv{i}.w"][:] = 1.0
            params[f"conv{i}.b"][:] = 0.125
        params["fc6.w"][:] = 2.0
        params["fc6.b"][:] = -0.25
        params["fc7.0.w"][:] = 3.0
        params["fc7.0.b"][:] = 0.5
        params["fc8.0.w"][:] = -1.0
        params["fc8.0.b"][:] = 0.0625
        net = GazeNet(cfg, params)
        # hand computation: five conv stages add 0.125 each (weights 1,
        # all activations positive), fc6 = 2v - 0.25, fc7 = 3v + 0.5, fc8 = -v + 0.0625
        v = x0
        for _ in range(5):
            v = v * 1.0 + 0.125
        v = 2.0 * v - 0.25
        v = 3.0 * v + 0.5
        expected = -v + 0.0625
        out = net.forward(np.full((1, 1, 1), x0, np.float32), np.zeros(2), 0)
        np.testing.assert_allclose(out, [expected, expected], rtol=1e-6)

    @pytest.mark.parametrize("use_skip,pose", [(True, True), (False, False), (True, False)])
    def test_matches_direct_loop_reference(self, use_skip, pose):
        cfg = tiny_config(use_skip=use_skip, head_pose_input=pose)
        net = GazeNet.init(cfg, seed=42)
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, 1, 8, 12)).astype(np.float32)
        heads = rng.uniform(-1, 1, (5, 2)).astype(np.float32)
        got = net.forward_batch(x, heads, 2)
        want = forward_ref(net, x, heads, 2)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)

    def test_shape_validation(self):
        net = GazeNet.init(tiny_config(), seed=0)
        with pytest.raises(ValueError):
            net.forward_batch(np.zeros((2, 1, 9, 12), np.float32), np.zeros((2, 2)), 0)
        with pytest.raises(ValueError):
            net.forward_batch(np.zeros((2, 1, 8, 12), np.float32), np.zeros((2, 2)), 3)
        with pytest.raises(ValueError):
            net.forward_batch(np.zeros((2, 1, 8, 12), np.float32), np.zeros((3, 2)), 0)


class TestBackward:
    def test_zero_loss_gives_zero_gradients(self):
        net = GazeNet.init(tiny_config(), seed=3)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 1, 8, 12)).astype(np.float32)
        heads = rng.uniform(-1, 1, (3, 2)).astype(np.float32)
        out, cache = net.forward_batch(x, heads, 0, want_cache=True)
        _, dout = loss_and_grad(out, out.copy())  # targets equal outputs
        grads = net.backward_batch(cache, dout)
        for name, g in grads.items():
            assert np.all(g == 0), name

    def test_routing_isolation_exact(self):
        net = GazeNet.init(tiny_config(k=3), seed=5)
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 1, 8, 12)).astype(np.float32)
        heads = rng.uniform(-1, 1, (4, 2)).astype(np.float32)
        out, cache = net.forward_batch(x, heads, 1, want_cache=True)
        grads = net.backward_batch(cache, np.ones_like(out))
        for j in (0, 2):
            for name in net.config.head_names(j):
                assert name not in grads  # never materialized == exactly zero
        for name in net.config.head_names(1):
            assert name in grads
        for name in net.config.trunk_names():
            assert name in grads

    def test_gradients_match_finite_differences_f64(self):
        cfg = tiny_config()
        net = GazeNet.init(cfg, seed=11).astype(np.float64)
        rng = np.random.default_rng(12)
        x = rng.standard_normal((3, 1, 8, 12))
        heads = rng.uniform(-1, 1, (3, 2))
        targets = rng.uniform(-0.5, 0.5, (3, 2))
        rel, checked, skipped = max_gradcheck_error(net, x, heads, targets, cluster_id=1)
        assert rel < 1e-4
        assert skipped <= 0.05 * checked

    def test_f32_backward_matches_f64(self):
        # finite differences at f32 are dominated by quantization noise;
        # the f64 FD check above anchors the math, this one pins the
        # 32-bit path to it within 1e-2 relative
        cfg = tiny_config(use_skip=False)
        net64 = GazeNet.init(cfg, seed=13).astype(np.float64)
        net32 = net64.astype(np.float32)
        rng = np.random.default_rng(14)
        x = rng.standard_normal((2, 1, 8, 12))
        heads = rng.uniform(-1, 1, (2, 2))
        targets = rng.uniform(-0.5, 0.5, (2, 2))
        grads = {}
        for net in (net64, net32):
            out, cache = net.forward_batch(
                x.astype(net.dtype), heads.astype(net.dtype), 0, want_cache=True
            )
            _, dout = loss_and_grad(out, targets)
            grads[net.dtype.char] = net.backward_batch(cache, dout)
        for name, g64 in grads["d"].items():
            g32 = grads["f"][name].astype(np.float64)
            denom = max(float(np.abs(g64).max()), 1e-6)
            assert np.abs(g32 - g64).max() / denom < 1e-2, name


def activation_pattern(cache):
    """ReLU signs and pool argmax choices; FD is invalid across changes."""
    parts = [tuple((pre > 0).ravel().tolist()) for pre in cache["conv_pre"]]
    parts.append(tuple(cache["pool_idx"].ravel().tolist()))
    parts.append(tuple((cache["z6"] > 0).ravel().tolist()))
    parts.append(tuple((cache["z7"] > 0).ravel().tolist()))
    return hash(tuple(parts))


def max_gradcheck_error(net, x, heads, targets, cluster_id, eps=1e-6):
    """Largest relative disagreement between backward() and central
    finite differences of the mse loss over every parameter scalar.

    Scalars whose perturbation flips a ReLU/pool decision are skipped
    (the loss has a kink there and FD does not apply).

    Returns:
        (worst relative error, scalars checked, scalars skipped)
    """
    out, cache = net.forward_batch(x, heads, cluster_id, want_cache=True)
    _, dout = loss_and_grad(out, targets)
    grads = net.backward_batch(cache, dout)

    def loss_and_pattern():
        out, c = net.forward_batch(x, heads, cluster_id, want_cache=True)
        loss = float(np.mean((out.astype(np.float64) - targets) ** 2))
        return loss, activation_pattern(c)

    worst, checked, skipped = 0.0, 0, 0
    base_pattern = activation_pattern(cache)
    for name, g in grads.items():
        flat_p = net.params[name].ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            keep = flat_p[i]
            flat_p[i] = keep + eps
            up, pat_up = loss_and_pattern()
            flat_p[i] = keep - eps
            down, pat_down = loss_and_pattern()
            flat_p[i] = keep
            if pat_up != base_pattern or pat_down != base_pattern:
                skipped += 1
                continue
            checked += 1
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(flat_g[i]), 1e-6)
            worst = max(worst, abs(fd - flat_g[i]) / denom)
    return worst, checked, skipped


class TestFlopCount:
    def test_independent_of_head_count(self):
        assert tiny_config(k=1).flop_count() == tiny_config(k=7).flop_count()

    def test_default_config_hand_tally(self):
        # per-layer tally for the default 64x40 config
        cfg = NetConfig()
        expected = (
            20 * 32 * 32 * (1 * 49)      # conv1 7x7/32/s2/p3 -> 20x32
            + 10 * 16 * 64 * (32 * 25)   # conv2 5x5/64/s2/p2 -> 10x16
            + 10 * 16 * 96 * (64 * 9)    # conv3
            + 10 * 16 * 96 * (96 * 9)    # conv4
            + 10 * 16 * 64 * (96 * 9)    # conv5
            + (64 * 5 * 8) * 128         # fc6 after 2x2 pool -> 5x8
            + 96 * 128                   # skip projection from conv3 gap
            + 128 * 64                   # fc7
            + (64 + 2) * 2               # fc8 with pose concat
        )
        assert cfg.flop_count() == expected

    def test_fc_layer_contribution(self):
        # growing fc7 by one unit adds exactly fc6 + fc8-input MACs
        a = tiny_config(fc7=4).flop_count()
        b = tiny_config(fc7=5).flop_count()
        assert b - a == tiny_config().fc6 + 2


class TestDeterminism:
    def test_init_is_seeded(self):
        a = GazeNet.init(tiny_config(), seed=9)
        b = GazeNet.init(tiny_config(), seed=9)
        c = GazeNet.init(tiny_config(), seed=10)
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name])
        assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)

    def test_forward_is_pure(self):
        net = GazeNet.init(tiny_config(), seed=1)
        x = np.random.default_rng(2).standard_normal((2, 1, 8, 12)).astype(np.float32)
        h = np.zeros((2, 2), np.float32)
        assert np.array_equal(net.forward_batch(x, h, 0), net.forward_batch(x, h, 0))
