import numpy as np
import pytest

from ltrdiff import numcore as nc
from ltrdiff.evaluation import ndcg_at_k
from ltrdiff.model import (
    NetConfig,
    TimeEmbedding,
    fold_to_discriminative,
    forward_denoiser,
    forward_discriminative,
    init_parameters,
    label_onehot,
    load_checkpoint,
    mask_onehot,
    save_checkpoint,
    score,
    score_pointwise,
)

from _oracles import fd_grad, rel_err

LETOR_DISC = NetConfig(feature_dim=46, hidden_dim=256, label_outputs=2)
LETOR_GEN = NetConfig(feature_dim=46, hidden_dim=256, mode="generative", label_outputs=2, label_classes=2)


def zero_head(net):
    net.params["head.weight"].values[:] = 0.0
    net.params["head.bias"].values[:] = 0.0
    return net


class TestDiscriminative:
    def test_zero_head_gives_zero_logits(self):
        net = zero_head(init_parameters(LETOR_DISC, 0))
        x = np.random.default_rng(0).normal(size=(5, 46))
        np.testing.assert_array_equal(forward_discriminative(net, x).values, np.zeros((5, 2)))

    def test_inference_is_deterministic(self):
        net = init_parameters(LETOR_DISC, 1)
        x = np.random.default_rng(0).normal(size=(5, 46))
        a = forward_discriminative(net, x).values
        b = forward_discriminative(net, x).values
        assert a.tobytes() == b.tobytes()

    def test_training_mode_uses_dropout(self):
        net = init_parameters(LETOR_DISC, 1)
        x = np.random.default_rng(0).normal(size=(5, 46))
        a = forward_discriminative(net, x, training=True, rng=np.random.default_rng(1)).values
        assert not np.array_equal(a, forward_discriminative(net, x).values)

    def test_parameter_count(self):
        h = 256
        expected = (46 * h + h) + 3 * (h * h + h) + 4 * (2 * h) + (h * 2 + 2)
        assert init_parameters(LETOR_DISC, 0).num_parameters() == expected

    def test_feature_count_mismatch(self):
        with pytest.raises(nc.ShapeError):
            forward_discriminative(init_parameters(LETOR_DISC, 0), np.zeros((2, 45)))


class TestDenoiser:
    def test_output_widths(self):
        net = init_parameters(LETOR_GEN, 0)
        x = np.random.default_rng(0).normal(size=(3, 46))
        chi, psi = forward_denoiser(net, x, mask_onehot(3, 2), 0.5)
        assert chi.shape == (3, 46) and psi.shape == (3, 2)

    def test_input_carries_mask_slot_output_does_not(self):
        assert LETOR_GEN.input_dim == 46 + 3 + 16
        assert LETOR_GEN.output_dim == 46 + 2
        with pytest.raises(ValueError):
            NetConfig(feature_dim=46, mode="generative", label_outputs=3, label_classes=2)

    def test_invalid_onehot(self):
        net = init_parameters(LETOR_GEN, 0)
        with pytest.raises(ValueError):
            forward_denoiser(net, np.zeros((1, 46)), np.array([[1.0, 1.0, 0.0]]), 0.0)
        with pytest.raises(ValueError):
            forward_denoiser(net, np.zeros((1, 46)), np.array([[1.0, 0.0]]), 0.0)

    def test_time_out_of_range(self):
        net = init_parameters(LETOR_GEN, 0)
        with pytest.raises(ValueError):
            forward_denoiser(net, np.zeros((1, 46)), mask_onehot(1, 2), 1.5)

    def test_gradient_matches_finite_differences(self):
        cfg = NetConfig(feature_dim=4, hidden_dim=6, mode="generative", label_classes=2, time_embed_dim=4, dropout_rate=0.0)
        net = init_parameters(cfg, 3)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 4))
        y = label_onehot([0, 1, 2, 2, 1], 2)
        t = rng.random(5)
        eps = rng.normal(size=(5, 4))

        def build():
            chi, psi = forward_denoiser(net, x, y, t)
            return nc.add(nc.mean(nc.square(nc.sub(chi, eps))), nc.softmax_cross_entropy(psi, [0, 1, 1, 0, 1]))

        with nc.Tape() as tape:
            loss = build()
        nc.backward(loss, tape, net.parameters())
        for p in net.parameters():
            assert rel_err(p.grad, fd_grad(lambda: build().item(), p.values, 1e-5)) < 1e-3

    def test_backbone_shared_with_discriminative(self):
        disc, gen = LETOR_DISC.layer_dims(), LETOR_GEN.layer_dims()
        assert len(disc) == len(gen)
        assert disc[1:-1] == gen[1:-1]
        assert disc[0][1] == gen[0][1] and disc[-1][0] == gen[-1][0]


class TestScoring:
    def test_zero_head_scores_half(self):
        net = zero_head(init_parameters(LETOR_GEN, 0))
        s = score_pointwise(net, np.random.default_rng(0).normal(size=(4, 46)))
        np.testing.assert_array_equal(s, np.full(4, 0.5))

    def test_scores_in_open_interval(self):
        net = init_parameters(LETOR_GEN, 2)
        s = score_pointwise(net, 3 * np.random.default_rng(0).normal(size=(100, 46)))
        assert np.all((s > 0) & (s < 1))

    def test_uses_mask_and_time_zero(self):
        net = init_parameters(LETOR_GEN, 2)
        x = np.random.default_rng(0).normal(size=(4, 46))
        _, psi = forward_denoiser(net, x, mask_onehot(4, 2), 0.0)
        expected = nc.softmax_values(psi.values)[:, 1]
        np.testing.assert_array_equal(score_pointwise(net, x), expected)

    def test_ranking_invariant_under_monotone_transform(self):
        net = init_parameters(LETOR_GEN, 4)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(30, 46))
        labels = rng.integers(0, 3, 30)
        s = score_pointwise(net, x)
        for f in (np.exp, lambda v: 3 * v + 1, lambda v: np.log(v / (1 - v))):
            assert ndcg_at_k(f(s), labels, 10) == ndcg_at_k(s, labels, 10)

    def test_noise_head_does_not_affect_scores(self):
        net = init_parameters(LETOR_GEN, 5)
        x = np.random.default_rng(0).normal(size=(20, 46))
        before = score_pointwise(net, x)
        net.params["head.weight"].values[:, :46] = 0.0
        net.params["head.bias"].values[:46] = 0.0
        assert score_pointwise(net, x).tobytes() == before.tobytes()

    def test_batched_score_matches_single_pass(self):
        net = init_parameters(LETOR_DISC, 5)
        x = np.random.default_rng(0).normal(size=(25, 46))
        np.testing.assert_allclose(score(net, x, batch_size=7), score(net, x), rtol=0, atol=1e-15)


class TestInit:
    def test_same_seed_same_parameters(self):
        a, b = init_parameters(LETOR_GEN, 9), init_parameters(LETOR_GEN, 9)
        assert a.flat_parameters().tobytes() == b.flat_parameters().tobytes()

    def test_weight_moments(self):
        cfg = NetConfig(feature_dim=1024, hidden_dim=1024, num_hidden_layers=1)
        w = init_parameters(cfg, 0).params["hidden0.weight"].values
        bound = 1 / np.sqrt(1024)
        n = w.size
        assert abs(w.mean()) < 3 * bound / np.sqrt(3 * n)
        assert np.abs(w).max() <= bound

    def test_biases_zero_and_gains_one(self):
        net = init_parameters(LETOR_DISC, 0)
        for name, p in net.params.items():
            if name.endswith(".bias"):
                assert not p.values.any()
            if name.endswith(".gain"):
                assert np.all(p.values == 1.0)


class TestTimeEmbedding:
    def test_zero_is_finite_and_fixed(self):
        e = TimeEmbedding(16)
        np.testing.assert_array_equal(e(0.0), e(0.0))
        assert np.all(np.isfinite(e(0.0)))
        np.testing.assert_array_equal(e(0.0)[0, :8], 0.0)

    def test_distinct_times(self):
        e = TimeEmbedding(16)(np.linspace(0, 1, 51))
        dists = np.linalg.norm(e[:, None] - e[None, :], axis=-1)
        assert np.all(dists[~np.eye(51, dtype=bool)] > 1e-3)


def test_checkpoint_round_trip(tmp_path):
    net = init_parameters(LETOR_GEN, 7)
    save_checkpoint(net, tmp_path / "m.ckpt", step=123, extra={"method": "x"})
    back, step, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert step == 123 and extra == {"method": "x"} and back.config == net.config
    assert back.flat_parameters().tobytes() == net.flat_parameters().tobytes()
    save_checkpoint(back, tmp_path / "n.ckpt", step=123, extra={"method": "x"})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_folding_fixed_inputs_into_bias():
    net = init_parameters(LETOR_GEN, 8)
    x = np.random.default_rng(0).normal(size=(6, 46))
    _, psi = forward_denoiser(net, x, mask_onehot(6, 2), 0.3)
    folded = fold_to_discriminative(net, 2, 0.3)
    np.testing.assert_allclose(forward_discriminative(folded, x).values, psi.values, rtol=0, atol=1e-12)
