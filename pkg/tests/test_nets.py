import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdabench import diffcore as dc
from pdabench import nets
from pdabench.config import ConfigError, FormatError

DIMS = nets.NetDims(d_in=5, k_source=10)


def test_init_is_seeded():
    a, b, c = nets.init_bundle(DIMS, 1), nets.init_bundle(DIMS, 1), nets.init_bundle(DIMS, 2)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    assert not np.array_equal(a.params["classifier.w"].data, c.params["classifier.w"].data)
    assert a.params["classifier.w"].shape == (256, 10)


def test_every_parameter_has_one_multiplier():
    b = nets.init_bundle(DIMS, 0, with_discriminator=True, with_critic=True)
    assert set(b.params) == set(b.lr_mult)
    assert set(b.lr_mult.values()) <= {1.0, 10.0}
    assert all(b.lr_mult[k] == 1.0 for k in b.params if k.startswith("backbone"))
    assert all(b.lr_mult[k] == 10.0 for k in b.params
               if k.startswith(("bottleneck", "classifier")))


def test_feature_shapes_and_dim_check():
    b = nets.init_bundle(DIMS, 0)
    assert nets.forward_features(b, np.zeros((1, 5))).shape == (1, 256)
    assert nets.forward_logits(b, np.zeros((3, 5))).shape == (3, 10)
    with pytest.raises(ConfigError):
        nets.forward_features(b, np.zeros((1, 4)))


def test_zero_weights_give_bias():
    b = nets.init_bundle(DIMS, 0)
    for p in b.params.values():
        p.data = np.zeros_like(p.data)
    b.params["bottleneck.b"].data = np.arange(256.0)
    z = nets.forward_features(b, np.random.default_rng(0).standard_normal((4, 5))).data
    assert np.array_equal(z, np.tile(np.arange(256.0), (4, 1)))


def test_feature_input_gradient():
    b = nets.init_bundle(nets.NetDims(3, 4, (6,), 5), 0)
    x = dc.Tensor(np.random.default_rng(1).standard_normal((2, 3)), requires_grad=True)
    assert dc.gradcheck(lambda: dc.mean(nets.forward_features(b, x)), [x]) < 1e-4


def test_softmax_rows_and_argmax_scale_invariance():
    b = nets.init_bundle(DIMS, 0)
    x = np.random.default_rng(2).standard_normal((8, 5))
    p = nets.predict_proba(b, x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    b.params["classifier.b"].data = np.zeros(10)
    before = np.argmax(nets.forward_logits_np(b, x), axis=1)
    b.params["classifier.w"].data = b.params["classifier.w"].data * 3.7
    assert np.array_equal(np.argmax(nets.forward_logits_np(b, x), axis=1), before)


@given(st.floats(-50, 50))
def test_discriminator_output_in_open_interval(shift):
    b = nets.init_bundle(DIMS, 0, with_discriminator=True)
    z = np.random.default_rng(0).standard_normal((4, 256))
    b.params["disc1.b"].data = np.array([shift])
    p = nets.discriminator_prob(b, z).data
    assert np.all((p > 0) & (p < 1))


@given(st.floats(0.1, 20.0))
def test_critic_is_clamped(a_up):
    b = nets.init_bundle(DIMS, 0, with_critic=True)
    z = 50 * np.random.default_rng(0).standard_normal((16, 256))
    v = nets.critic(b, z, -a_up, a_up).data
    assert np.all(np.abs(v) <= a_up)


def test_critic_penalty_matches_finite_difference_input_gradients():
    dims = nets.NetDims(3, 2, (4,), 5, adv_hidden=6)
    b = nets.init_bundle(dims, 3, with_critic=True)
    z = np.random.default_rng(4).standard_normal((7, 5))
    norms = []
    for row in z:
        g = np.zeros(5)
        for j in range(5):
            e = np.zeros(5)
            e[j] = 1e-6
            hi = nets.critic(b, (row + e)[None], -100, 100).data.item()
            lo = nets.critic(b, (row - e)[None], -100, 100).data.item()
            g[j] = (hi - lo) / 2e-6
        norms.append(np.linalg.norm(g))
    want = np.mean((np.array(norms) - 1.0) ** 2)
    got = nets.critic_input_grad_norm_penalty(b, z, -100, 100).item()
    assert got == pytest.approx(want, rel=1e-6)


def test_checkpoint_round_trip(tmp_path):
    b = nets.init_bundle(DIMS, 0, with_discriminator=True)
    nets.save_checkpoint(b, tmp_path / "m.ckpt", {"seed": 1})
    back, side = nets.load_checkpoint(tmp_path / "m.ckpt")
    assert side["seed"] == 1 and back.dims == b.dims
    for k in b.params:
        assert np.array_equal(back.params[k].data, b.params[k].data)
        assert back.lr_mult[k] == b.lr_mult[k]
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        nets.load_checkpoint(tmp_path / "m.ckpt")
