import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rulssl import autodiff as ad
from rulssl import models as M
from rulssl.data import WINDOW_SIZES

WINDOWS = sorted(set(WINDOW_SIZES.values()))


@pytest.mark.parametrize("w", WINDOWS)
def test_extractor_shapes(w):
    cfg = M.ExtractorConfig(window=w, filters=8)
    f = M.FeatureExtractor(cfg, np.random.default_rng(0))
    x = ad.Tensor(np.random.default_rng(1).normal(size=(3, 14, w)))
    assert f.features(x).shape == (3, 8, w - 6)
    assert f(x).shape == (3, 64)
    assert f.eval()(ad.Tensor(x.data[0])).shape == (64,)


def test_extractor_padding_schedule():
    assert M.PADDING_SCHEDULE == ("same", "valid") * 3
    f = M.FeatureExtractor(M.ExtractorConfig(30, 4), np.random.default_rng(0))
    assert [b.padding for b in f.conv] == list(M.PADDING_SCHEDULE)


def test_extractor_rejects_wrong_shape():
    f = M.FeatureExtractor(M.ExtractorConfig(20, 4), np.random.default_rng(0))
    with pytest.raises(ad.ShapeError):
        f(ad.Tensor(np.zeros((2, 13, 20))))
    with pytest.raises(ad.ShapeError):
        f(ad.Tensor(np.zeros((2, 14, 21))))


def test_eval_mode_deterministic():
    cfg = M.ExtractorConfig(15, 8, dropout=0.5)
    f = M.FeatureExtractor(cfg, np.random.default_rng(0))
    x = ad.Tensor(np.random.default_rng(2).normal(size=(4, 14, 15)))
    f(x, np.random.default_rng(0))  # populate running stats
    f.eval()
    assert np.array_equal(f(x).data, f(x).data)


@pytest.mark.parametrize("w, m", [(30, 32), (15, 8), (20, 3), (30, 1)])
def test_parameter_count_closed_form(w, m):
    f = M.FeatureExtractor(M.ExtractorConfig(w, m), np.random.default_rng(0))
    assert f.num_parameters() == M.extractor_param_count(w, m)


def test_parameter_paths():
    net = M.RulNetwork(M.ExtractorConfig(30, 4))
    names = set(net.named_parameters())
    assert {"f.conv1.weight", "f.conv6.bn.bias", "f.fc.weight", "g.bn.weight", "g.fc.bias"} <= names
    assert "f.conv3.bn.running_var" in net.state_dict()


def test_fingerprint_ignores_dropout_tracks_architecture():
    a = M.ExtractorConfig(30, 32, dropout=0.1)
    assert a.fingerprint() == M.ExtractorConfig(30, 32, dropout=0.4).fingerprint()
    assert a.fingerprint() != M.ExtractorConfig(20, 32).fingerprint()
    assert a.fingerprint() != M.ExtractorConfig(30, 16).fingerprint()


def test_regression_head_examples():
    rng = np.random.default_rng(0)
    head = M.RegressionHead(64, rng, normalize=False, zero=True).eval()
    head.fc.bias.data[:] = 3.5
    assert head(ad.Tensor(np.zeros(64))).item() == 3.5

    head = M.RegressionHead(64, rng, normalize=True)
    same = np.tile(rng.normal(size=64), (5, 1))
    out = head(ad.Tensor(same)).data
    assert out.shape == (5,) and np.all(out == out[0])


def test_regression_head_normalizes_input():
    head = M.RegressionHead(64, np.random.default_rng(0), normalize=True).eval()
    x = np.random.default_rng(1).normal(size=(3, 64))
    # with normalization, scaling the embedding must not change the prediction
    np.testing.assert_allclose(head(ad.Tensor(x)).data, head(ad.Tensor(7.0 * x)).data, rtol=1e-12)


def test_siamese_distance_examples():
    e1, e2 = np.eye(64)[0], np.eye(64)[1]
    assert M.siamese_distance(ad.Tensor(e1), ad.Tensor(e1)).item() == 0.0
    assert np.isclose(M.siamese_distance(ad.Tensor(e1), ad.Tensor(e2)).item(), 2.0)
    assert np.isclose(M.siamese_distance(ad.Tensor(e1), ad.Tensor(-e1)).item(), 4.0)
    with pytest.raises(ad.DegenerateInputError):
        M.siamese_distance(ad.Tensor(np.zeros(64)), ad.Tensor(e1))


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
@settings(max_examples=200, deadline=None)
def test_siamese_distance_properties(seed, lam):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=64), rng.normal(size=64)
    h = lambda u, v: M.siamese_distance(ad.Tensor(u), ad.Tensor(v)).item()
    assert abs(h(a, a)) <= 1e-9
    assert abs(h(a, -a) - 4) <= 1e-9
    assert abs(h(a, b) - h(b, a)) <= 1e-9
    assert abs(h(a, lam * a)) <= 1e-9
    assert 0 <= h(a, b) <= 4


@pytest.mark.parametrize("w", WINDOWS)
def test_decoder_mirrors_input_shape(w):
    cfg = M.ExtractorConfig(w, 8)
    rng = np.random.default_rng(0)
    f, dec = M.FeatureExtractor(cfg, rng), M.Decoder(cfg, rng)
    x = ad.Tensor(rng.normal(size=(2, 14, w)))
    out = dec(f(x))
    assert out.shape == x.shape
    assert np.all(np.isfinite(out.data))
    assert dec.eval()(ad.Tensor(rng.normal(size=64))).shape == (14, w)


def test_decoder_block_lengths():
    cfg = M.ExtractorConfig(15, 4)
    dec = M.Decoder(cfg, np.random.default_rng(0))
    # decoder runs the schedule in reverse: valid blocks grow T by 2
    assert [b.padding for b in dec.conv] == list(reversed(M.PADDING_SCHEDULE))
    t = ad.Tensor(np.ones((2, 4, 9)))
    assert dec.conv[0](t).shape == (2, 4, 11)


def test_decoder_rejects_wrong_latent():
    dec = M.Decoder(M.ExtractorConfig(15, 4), np.random.default_rng(0))
    with pytest.raises(ad.ShapeError):
        dec(ad.Tensor(np.ones((2, 32))))


def test_rbm_zero_weights():
    rbm = M.ConvRBM(np.zeros((8, 14, 3)), np.zeros(8), np.arange(14.0))
    v = np.random.default_rng(0).normal(size=(14, 3))
    h, recon = M.rbm_energy_step(v, rbm, np.random.default_rng(1))
    assert h.shape == (8,) and np.all(h >= 0)
    # noise at pre=0 is scaled by sigmoid'(0) = 1/4
    z = np.random.default_rng(1).standard_normal((1, 8))[0]
    np.testing.assert_allclose(h, np.maximum(0.25 * z, 0.0), rtol=1e-12)
    h0, recon0 = M.rbm_energy_step(v, rbm, None)
    assert np.all(h0 == 0)
    np.testing.assert_array_equal(recon0, np.tile(np.arange(14.0)[:, None], (1, 3)))


def test_rbm_deterministic_hidden_is_relu_of_conv():
    rng = np.random.default_rng(3)
    block = M.ConvBlock(14, 6, "same", rng)
    rbm = M.ConvRBM.from_block(block)
    v = rng.normal(size=(14, 3))
    h, _ = M.rbm_energy_step(v, rbm, None)
    conv = ad.conv1d(ad.Tensor(v), block.weight, block.bias, "valid").data[:, 0]
    np.testing.assert_allclose(h, np.maximum(conv, 0), rtol=1e-12, atol=1e-14)


def test_rbm_cd1_gradient_shapes():
    rbm = M.ConvRBM(np.random.default_rng(0).normal(size=(5, 14, 3)) * 0.1, np.zeros(5))
    v = np.random.default_rng(1).normal(size=(10, 14, 3))
    grads = rbm.cd1_gradients(v, np.random.default_rng(2))
    for name, p in rbm.named_parameters().items():
        assert grads[name].shape == p.shape


def test_extract_patches():
    r = np.arange(20.0).reshape(10, 2)
    p = M.extract_patches([r, r[:2]])
    assert p.shape == (8, 2, 3)
    np.testing.assert_array_equal(p[0], r[:3].T)


def test_network_checkpoint_round_trip(tmp_path):
    net = M.RulNetwork(M.ExtractorConfig(20, 4), seed=3)
    x = np.random.default_rng(0).normal(size=(5, 14, 20))
    net(ad.Tensor(x))  # move running stats off their init
    net.save(tmp_path / "n.json")
    back, meta = M.load_network(tmp_path / "n.json")
    assert meta["kind"] == "rul_network"
    np.testing.assert_array_equal(back.predict(x), net.predict(x))
    with pytest.raises(ValueError):
        M.load_network(tmp_path / "n.json", expect=M.ExtractorConfig(30, 4))


def test_extractor_checkpoint_reinitializes_head(tmp_path):
    net = M.RulNetwork(M.ExtractorConfig(15, 4), seed=1, normalize=True)
    M.save_extractor(tmp_path / "f.json", net.f, seed=9, method="self", normalize=True)
    back, meta = M.load_network(tmp_path / "f.json")
    assert meta["kind"] == "extractor" and back.normalize
    for k, v in net.f.state_dict("f.").items():
        assert np.array_equal(back.f.state_dict("f.")[k], v)
    assert not np.array_equal(back.g.fc.weight.data, net.g.fc.weight.data)
