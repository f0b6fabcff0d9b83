import numpy as np
import pytest

from lipauth import ndcompute as nd
from lipauth import siamese
from lipauth.errors import FormatError, LipAuthError, ShapeError
from lipauth.hnmloss import loss_and_grads

TINY = siamese.Architecture(frames=3, height=16, width=16, channels=(2, 2, 2), hidden=(2, 2), embed_dim=4)


def tiny_params(seed=0, dtype=np.float64):
    return siamese.init_params(seed, TINY, dtype)


class TestArchitecture:
    def test_full_size_chain(self):
        shapes = siamese.Architecture().conv_shapes()
        assert [s[1] for s in shapes] == [(32, 50, 50, 25), (64, 50, 25, 12), (96, 50, 12, 6)]
        assert [s[2] for s in shapes] == [(32, 50, 25, 12), (64, 50, 12, 6), (96, 50, 6, 3)]
        assert siamese.Architecture().rnn_input == 1728

    def test_param_shapes(self):
        shapes = siamese.Architecture().param_shapes()
        assert shapes["conv1.w"] == (32, 1, 3, 5, 5)
        assert shapes["gru1.fwd.w_ih"] == (1728, 384)
        assert shapes["gru2.bwd.w_hh"] == (64, 192)
        assert shapes["head.w"] == (256, 256)

    def test_scaled(self):
        arch = siamese.Architecture.scaled(0.25, height=32, width=16)
        assert arch.channels == (8, 16, 24) and arch.hidden == (32, 16)
        assert arch.rnn_input == 24 * 2 * 1
        assert arch.embed_dim == 256

    def test_collapse(self):
        with pytest.raises(ShapeError):
            siamese.Architecture(height=8, width=8).conv_shapes()

    def test_json_round_trip(self):
        arch = siamese.Architecture.scaled(0.5)
        assert siamese.Architecture.from_json(arch.to_json()) == arch


class TestInit:
    def test_ranges(self):
        p = siamese.init_params(0)
        assert np.abs(p["conv1.w"]).max() <= np.sqrt(1 / 75)
        assert np.abs(p["gru1.fwd.w_hh"]).max() <= np.sqrt(1 / 128)
        assert np.abs(p["head.w"]).max() <= np.sqrt(1 / 256)
        assert not p["gru1.fwd.b_ih"].any()
        assert all(v.dtype == np.float32 for v in p.values())

    def test_seeded(self):
        a, b = tiny_params(3), tiny_params(3)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


class TestForward:
    def test_unit_norm(self):
        x = np.random.default_rng(0).random((3, 1, 3, 16, 16))
        z = siamese.embed(x, tiny_params())
        assert z.shape == (3, 4)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1, atol=1e-6)

    def test_bad_input(self):
        with pytest.raises(ShapeError):
            siamese.embed(np.zeros((2, 3, 16, 16)), tiny_params())

    def test_wrong_frame_size_names_layer(self):
        with pytest.raises(ShapeError, match="gru1"):
            siamese.embed(np.zeros((1, 1, 3, 32, 32)), tiny_params())

    def test_batch_independent(self):
        x = np.random.default_rng(1).random((3, 1, 3, 16, 16))
        p = tiny_params()
        np.testing.assert_allclose(siamese.embed(x, p)[1], siamese.embed(x[1:2], p)[0], atol=1e-12)


class TestGradients:
    def test_network_gradient(self):
        rng = np.random.default_rng(2)
        params = tiny_params(1)
        x1, x2 = rng.random((2, 1, 3, 16, 16)), rng.random((2, 1, 3, 16, 16))
        _, grads, _ = siamese.pair_loss_and_grads(x1, x2, params)
        names = ["head.w", "gru2.fwd.w_hh", "gru1.bwd.b_ih", "conv3.b", "conv1.b"]

        def loss(*vals):
            p = dict(params, **dict(zip(names, vals)))
            z = siamese.embed(np.concatenate([x1, x2]), p)
            return np.array(loss_and_grads(z[:2], z[2:])[0])

        def back(d, *vals):
            return [d * grads[n] for n in names]

        assert nd.grad_check(loss, back, [params[n] for n in names]) < 1e-4

    def test_weight_sharing(self):
        # the pair gradient is the sum of both branches' contributions
        rng = np.random.default_rng(3)
        params = tiny_params(2)
        x1, x2 = rng.random((2, 1, 3, 16, 16)), rng.random((2, 1, 3, 16, 16))
        _, grads, _ = siamese.pair_loss_and_grads(x1, x2, params)
        z1, a1 = siamese.forward(x1, params, keep=True)
        z2, a2 = siamese.forward(x2, params, keep=True)
        _, dz1, dz2, _ = loss_and_grads(z1, z2)
        g1 = siamese.backward(dz1, a1, params)
        g2 = siamese.backward(dz2, a2, params)
        for k in grads:
            np.testing.assert_allclose(grads[k], g1[k] + g2[k], atol=1e-12)

    def test_all_params_get_gradients(self):
        params = tiny_params(0)
        x = np.random.default_rng(0).random((2, 1, 3, 16, 16))
        _, grads, _ = siamese.pair_loss_and_grads(x, x[::-1], params)
        assert set(grads) == set(params)
        for k in params:
            assert grads[k].shape == params[k].shape


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = siamese.init_params(0, TINY)
        _, state = nd.adam_step(params, {k: np.ones_like(v) for k, v in params.items()},
                                nd.AdamState(lr=1e-3))
        siamese.save_checkpoint(tmp_path / "a.ckpt", params, TINY, state, {"note": "x"})
        ck = siamese.load_checkpoint(tmp_path / "a.ckpt")
        assert ck.arch == TINY
        assert ck.extra == {"note": "x"}
        assert ck.opt_state.step == 1 and ck.opt_state.lr == 1e-3
        for k in params:
            np.testing.assert_array_equal(ck.params[k], params[k])
            np.testing.assert_array_equal(ck.opt_state.m[k], state.m[k])
        siamese.save_checkpoint(tmp_path / "b.ckpt", ck.params, ck.arch, ck.opt_state, ck.extra)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert ck.fingerprint == siamese.fingerprint(tmp_path / "a.ckpt")

    def test_corrupt(self, tmp_path):
        siamese.save_checkpoint(tmp_path / "a.ckpt", siamese.init_params(0, TINY), TINY)
        data = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(data[:-3])
        with pytest.raises(FormatError):
            siamese.load_checkpoint(tmp_path / "t.ckpt")
        (tmp_path / "m.ckpt").write_bytes(b"XXXX" + data[4:])
        with pytest.raises(FormatError):
            siamese.load_checkpoint(tmp_path / "m.ckpt")
        (tmp_path / "x.ckpt").write_bytes(data + b"\0")
        with pytest.raises(FormatError):
            siamese.load_checkpoint(tmp_path / "x.ckpt")

    def test_architecture_mismatch(self, tmp_path):
        siamese.save_checkpoint(tmp_path / "a.ckpt", siamese.init_params(0, TINY), TINY)
        other = siamese.Architecture(frames=3, height=16, width=16, channels=(2, 2, 3),
                                     hidden=(2, 2), embed_dim=4)
        with pytest.raises(ShapeError):
            siamese.load_checkpoint(tmp_path / "a.ckpt", other)


class TestTrainConfig:
    def test_defaults(self):
        c = siamese.TrainConfig()
        assert (c.epochs, c.lr, c.train_batch, c.eval_batch) == (15, 1e-4, 80, 40)
        assert c.arch == siamese.Architecture()

    def test_parse_round_trip(self):
        c = siamese.TrainConfig.from_text("epochs = 3  # short\nlr=1e-3\nscale=0.25\naugment=false\n")
        assert (c.epochs, c.lr, c.scale, c.augment) == (3, 1e-3, 0.25, False)
        assert siamese.TrainConfig.from_text(c.to_text()) == c

    @pytest.mark.parametrize("text", ["epochs", "bogus=1", "dropout=0.2", "epochs=0"])
    def test_invalid(self, text):
        with pytest.raises((LipAuthError, ValueError)):
            siamese.TrainConfig.from_text(text)
