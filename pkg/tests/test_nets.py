import numpy as np
import pytest
from scipy import integrate

from diverse_imitation import autodiff as ad
from diverse_imitation import nets
from diverse_imitation.autodiff import ParamVector, Var
from diverse_imitation.nets import EncoderSpec, MlpSpec, StateDecoderSpec


def composed_lstm(x, W, b):
    """Reference LSTM layer built cell by cell from generic primitives."""
    T, B, I = np.shape(ad.value_of(x))
    H = np.shape(ad.value_of(W))[1] // 4
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    outs = []
    for t in range(T):
        inp = ad.concat([ad.index(x, (t,)), h], axis=1)
        a = ad.add(ad.matmul(inp, W), ad.expand(ad.reshape(b, (1, 4 * H)), (B, 4 * H)))
        i = ad.sigmoid(ad.index(a, (slice(None), slice(0, H))))
        f = ad.sigmoid(ad.index(a, (slice(None), slice(H, 2 * H))))
        g = ad.tanh(ad.index(a, (slice(None), slice(2 * H, 3 * H))))
        o = ad.sigmoid(ad.index(a, (slice(None), slice(3 * H, 4 * H))))
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        outs.append(ad.reshape(h, (1, B, H)))
    return ad.concat(outs, axis=0)


# ------------------------------------------------------------------ MLP

def test_mlp_zero_weights_give_zero():
    spec = MlpSpec(3, 2, (5, 4))
    p = nets.init_mlp(spec, np.random.default_rng(0)).zeros_like()
    out = nets.mlp_forward(p.arrays(), spec, np.random.default_rng(1).normal(size=(7, 3)))
    np.testing.assert_array_equal(out, np.zeros((7, 2)))


def test_mlp_identity_linear():
    spec = MlpSpec(3, 3)
    p = ParamVector.from_arrays({"W0": np.eye(3), "b0": np.zeros(3)})
    x = np.random.default_rng(2).normal(size=(4, 3))
    np.testing.assert_array_equal(nets.mlp_forward(p.arrays(), spec, x), x)
    np.testing.assert_array_equal(nets.mlp_forward(p.arrays(), spec, x[0]), x[0])


def test_mlp_matches_hand_unrolled():
    spec = MlpSpec(2, 3, (16, 8))
    rng = np.random.default_rng(3)
    p = nets.init_mlp(spec, rng)
    p = p.with_data(rng.normal(size=p.size))
    x = rng.normal(size=(5, 2))
    a = p.arrays()
    expected = np.tanh(np.tanh(x @ a["W0"] + a["b0"]) @ a["W1"] + a["b1"]) @ a["W2"] + a["b2"]
    np.testing.assert_allclose(nets.mlp_forward(a, spec, x), expected, rtol=0, atol=1e-12)


def test_mlp_dimension_mismatch():
    with pytest.raises(ad.ShapeError):
        nets.mlp_forward(nets.init_mlp(MlpSpec(3, 1), np.random.default_rng(0)).arrays(),
                         MlpSpec(3, 1), np.zeros((2, 4)))


def test_mlp_gradient_check():
    spec = MlpSpec(3, 2, (4,))
    rng = np.random.default_rng(4)
    p = nets.init_mlp(spec, rng)
    x = rng.normal(size=(6, 3))
    f = lambda q: ad.sum(ad.tanh(nets.mlp_forward(q, spec, x)))
    assert ad.check_gradient(f, p) < 1e-4


# ----------------------------------------------------------------- LSTM

def test_fused_lstm_matches_composed_cells():
    rng = np.random.default_rng(5)
    T, B, I, H = 6, 3, 2, 4
    x = rng.normal(size=(T, B, I))
    p = ParamVector.from_arrays({"W": rng.normal(size=(I + H, 4 * H)) * 0.5,
                                 "b": rng.normal(size=4 * H), "x": x})
    w = rng.normal(size=(T, B, H))
    fused = lambda q: ad.sum(ad.mul(nets.lstm_sequence(q["x"], q["W"], q["b"]), w))
    ref = lambda q: ad.sum(ad.mul(composed_lstm(q["x"], q["W"], q["b"]), w))
    v1, g1 = ad.value_and_grad(fused, p)
    v2, g2 = ad.value_and_grad(ref, p)
    assert v1 == pytest.approx(v2, abs=1e-12)
    np.testing.assert_allclose(g1.data, g2.data, rtol=1e-10, atol=1e-12)
    assert ad.check_gradient(fused, p) < 1e-6


def test_encoder_zero_weights():
    spec = EncoderSpec(3, 5, 2)
    p = nets.init_encoder(spec, np.random.default_rng(0)).zeros_like()
    m, s = nets.birnn_encode(p.arrays(), spec, np.random.default_rng(1).normal(size=(7, 3)))
    np.testing.assert_array_equal(m, np.zeros(2))
    np.testing.assert_array_equal(s, np.zeros(2))


def test_encoder_length_one_is_single_step_output():
    spec = EncoderSpec(3, 4, 2)
    rng = np.random.default_rng(2)
    p = nets.init_encoder(spec, rng).arrays()
    x = rng.normal(size=(1, 3))
    m, s = nets.birnn_encode(p, spec, x)
    xs = x.reshape(1, 1, 3)
    hf = nets.lstm_sequence(nets.lstm_sequence(xs, p["fwd0_W"], p["fwd0_b"]), p["fwd1_W"], p["fwd1_b"])
    hb = nets.lstm_sequence(nets.lstm_sequence(xs, p["bwd0_W"], p["bwd0_b"]), p["bwd1_W"], p["bwd1_b"])
    out = np.concatenate([hf[0], hb[0]], axis=1) @ p["head_W"] + p["head_b"]
    np.testing.assert_allclose(np.concatenate([m, s]), out[0], atol=1e-15)


def test_encoder_rejects_empty_sequence():
    spec = EncoderSpec(3, 4, 2)
    p = nets.init_encoder(spec, np.random.default_rng(0)).arrays()
    with pytest.raises(ad.ShapeError):
        nets.birnn_encode(p, spec, np.zeros((0, 3)))


def test_encoder_reversal_with_symmetric_weights():
    spec = EncoderSpec(2, 3, 2)
    rng = np.random.default_rng(6)
    p = nets.init_encoder(spec, rng)
    a = p.arrays()
    for layer in range(2):
        a[f"bwd{layer}_W"][...] = a[f"fwd{layer}_W"]
        a[f"bwd{layer}_b"][...] = a[f"fwd{layer}_b"]
    H = spec.recurrent_width
    a["head_W"][H:] = a["head_W"][:H]
    x = rng.normal(size=(9, 2))
    m1, s1 = nets.birnn_encode(a, spec, x)
    m2, s2 = nets.birnn_encode(a, spec, x[::-1])
    np.testing.assert_allclose(m1, m2, atol=1e-14)
    np.testing.assert_allclose(s1, s2, atol=1e-14)
    # without symmetric head the embedding changes, so the check is not vacuous
    a["head_W"][H:] *= -1.0
    assert not np.allclose(nets.birnn_encode(a, spec, x)[0], nets.birnn_encode(a, spec, x[::-1])[0])


def test_encoder_gradient_check():
    spec = EncoderSpec(2, 3, 2)
    rng = np.random.default_rng(7)
    p = nets.init_encoder(spec, rng)
    x = rng.normal(size=(2, 4, 2))
    f = lambda q: ad.sum(ad.mul(nets.birnn_encode_batch(q, spec, x)[0], 1.0)) + \
        ad.sum(ad.exp(nets.birnn_encode_batch(q, spec, x)[1]))
    assert ad.check_gradient(f, p) < 1e-4


# ---------------------------------------------------------- mixtures

def test_mog_single_component_is_gaussian():
    got = nets.mog_log_prob(np.array([0.3]), np.array([1.0]), np.array([-0.2]), np.array(0.4))
    want = ad.gaussian_log_prob(np.array([0.4]), np.array([1.0]), np.array([-0.2]))
    assert got == pytest.approx(want, abs=1e-14)


def test_mog_identical_components_collapse():
    got = nets.mog_log_prob(np.array([2.0, -1.0]), np.array([0.5, 0.5]), np.array([0.1, 0.1]),
                            np.array(0.9))
    want = nets.mog_log_prob(np.array([0.0]), np.array([0.5]), np.array([0.1]), np.array(0.9))
    assert got == pytest.approx(want, abs=1e-14)


def test_mog_density_integrates_to_one():
    rng = np.random.default_rng(8)
    logits, means, ls = rng.normal(size=3), rng.normal(size=3) * 2, rng.uniform(-1, 0.5, size=3)
    f = lambda v: float(np.exp(nets.mog_log_prob(logits, means, ls, np.array(v))))
    pts = np.sort(means)
    total, _ = integrate.quad(f, -30, 30, points=list(pts), epsabs=1e-12, epsrel=1e-12, limit=400)
    assert abs(total - 1.0) < 1e-6


# ------------------------------------------------------ state decoder

def _decoder(D=4, L=2, K=3, seed=0, layers=3):
    spec = StateDecoderSpec(D, L, channels=5, num_layers=layers, mixture_components=K)
    rng = np.random.default_rng(seed)
    p = nets.init_state_decoder(spec, rng)
    p = p.with_data(rng.normal(size=p.size) * 0.5)
    return spec, p, rng


def test_state_decoder_single_component_reduces_to_mog():
    spec, p, rng = _decoder(D=1)
    z, xp, xn = rng.normal(size=(3, 2)), rng.normal(size=(3, 1)), rng.normal(size=(3, 1))
    lg, mu, ls = nets.state_decoder_mixture(p.arrays(), spec, z, xp, xn)
    got = nets.state_decoder_log_prob(p.arrays(), spec, z, xp, xn)
    want = nets.mog_log_prob(lg[:, 0], mu[:, 0], ls[:, 0], xn[:, 0])
    np.testing.assert_array_equal(got, want)


def test_state_decoder_zero_weights_standard_normal():
    spec = StateDecoderSpec(3, 2, channels=4, num_layers=2, mixture_components=1)
    p = nets.init_state_decoder(spec, np.random.default_rng(0)).zeros_like()
    rng = np.random.default_rng(1)
    z, xp, xn = rng.normal(size=2), rng.normal(size=3), rng.normal(size=3)
    got = nets.state_decoder_log_prob(p.arrays(), spec, z, xp, xn)
    want = sum(ad.gaussian_log_prob(xn[d:d + 1], np.zeros(1), np.zeros(1)) for d in range(3))
    assert got == pytest.approx(want, abs=1e-14)


def test_state_decoder_perturbation_causality():
    spec, p, rng = _decoder(D=5)
    z, xp, xn = rng.normal(size=(4, 2)), rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    base = nets.state_decoder_component_log_probs(p.arrays(), spec, z, xp, xn)
    for d in range(5):
        bumped = xn.copy()
        bumped[:, d] += rng.normal(size=4)
        lp = nets.state_decoder_component_log_probs(p.arrays(), spec, z, xp, bumped)
        assert lp[:, :d].tobytes() == base[:, :d].tobytes()
        assert not np.array_equal(lp[:, d], base[:, d])


def test_state_decoder_sample_small_sigma_is_mean_path():
    spec = StateDecoderSpec(3, 2, channels=4, num_layers=2, mixture_components=1)
    rng = np.random.default_rng(2)
    p = nets.init_state_decoder(spec, rng)
    a = p.arrays()
    a["out_b"][2] = -20.0
    a["out_W"][:, 2] = 0.0
    z, xp = rng.normal(size=2), rng.normal(size=3)
    x = nets.state_decoder_sample(a, spec, z, xp, np.random.default_rng(3))
    # the mean path: each component's mean given the previous components
    _, mu, _ = nets.state_decoder_mixture(a, spec, z[None], xp[None], x[None])
    np.testing.assert_allclose(x, mu[0, :, 0], atol=1e-6)


def test_state_decoder_sample_monte_carlo_mean():
    spec, p, rng = _decoder(D=2, K=3, seed=4, layers=2)
    z, xp = rng.normal(size=2), rng.normal(size=2)
    n = 10_000
    draws = nets.state_decoder_sample(p.arrays(), spec, np.tile(z, (n, 1)), np.tile(xp, (n, 1)),
                                      np.random.default_rng(5))
    lg, mu, ls = nets.state_decoder_mixture(p.arrays(), spec, z[None], xp[None], np.zeros((1, 2)))
    w = np.exp(lg[0, 0] - lg[0, 0].max())
    w /= w.sum()
    mean = float(w @ mu[0, 0])
    var = float(w @ (np.exp(2 * ls[0, 0]) + mu[0, 0] ** 2)) - mean ** 2
    se = np.sqrt(var / n)
    assert abs(draws[:, 0].mean() - mean) < 3 * se


def test_state_decoder_sample_deterministic_under_seed():
    spec, p, rng = _decoder()
    z, xp = rng.normal(size=2), rng.normal(size=4)
    a = nets.state_decoder_sample(p.arrays(), spec, z, xp, np.random.default_rng(9))
    b = nets.state_decoder_sample(p.arrays(), spec, z, xp, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()


def test_state_decoder_autodiff_causality():
    for seed in range(5):
        spec, p, rng = _decoder(D=4, seed=seed)
        z, xp = rng.normal(size=(2, 2)), rng.normal(size=(2, 4))
        xn = Var(rng.normal(size=(2, 4)))
        lp = nets.state_decoder_component_log_probs(p.arrays(), spec, z, xp, xn)
        for d in range(4):
            g, = ad.grad(ad.sum(ad.index(lp, (slice(None), slice(0, d + 1)))), [xn])
            assert np.all(g[:, d + 1:] == 0.0)
            assert np.all(g[:, d] != 0.0)


def test_state_decoder_rejects_nonfinite_params():
    spec, p, rng = _decoder()
    a = p.arrays()
    a["out_b"][0] = np.nan
    with pytest.raises(ad.NumericalError, match="out_b"):
        nets.state_decoder_log_prob(a, spec, np.zeros(2), np.zeros(4), np.zeros(4))


def test_state_decoder_gradient_check():
    spec, p, rng = _decoder(D=3, K=2, layers=2)
    z, xp, xn = rng.normal(size=(2, 2)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    f = lambda q: ad.sum(nets.state_decoder_log_prob(q, spec, z, xp, xn))
    assert ad.check_gradient(f, p) < 1e-4


def test_forward_passes_are_pure():
    spec, p, rng = _decoder()
    z, xp, xn = rng.normal(size=(3, 2)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    a = nets.state_decoder_log_prob(p.arrays(), spec, z, xp, xn)
    b = nets.state_decoder_log_prob(p.arrays(), spec, z, xp, xn)
    assert a.tobytes() == b.tobytes()
