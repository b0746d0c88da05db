import numpy as np
import pytest

from randsac import tensor as T
from randsac.errors import ConfigurationError, DivergenceError
from randsac.gradcheck import tiny_problem
from randsac.layout import PartitionSpec, sample_layout
from randsac.masks import source_mask_from_ranks, token_ranks
from randsac.model import ModelConfig, RandSAC, expected_parameter_count
from randsac.tensor import Tensor
from randsac.tokenizer import patchify, unpatchify

from reference import reference_predict


def sample_ranks(rng, cfg, batch, spec=PartitionSpec("blob", "random", levels=(5,))):
    return np.stack([token_ranks(*sample_layout(rng, spec, *cfg.grid)) for _ in range(batch)])


def perturb_tokens(model, images, token_mask, rng):
    """Replace the pixels of the selected tokens with fresh noise."""
    cfg = model.config
    tok = patchify(images, cfg.patch).copy()
    tok[token_mask] = rng.random(tok[token_mask].shape)
    return unpatchify(tok, *cfg.grid, cfg.patch)


class TestConfig:
    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(dim=18, heads=4)

    def test_layers_at_least_one(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(enc_layers=0)

    def test_dict_round_trip(self):
        cfg = ModelConfig(dim=32, image_size=(16, 24))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestParameterCount:
    def test_tiny_by_hand(self, tiny_model):
        # d=16, hidden 64, token 12: embed 208, query 272, 2 encoder blocks of 3280,
        # one decoder block of 4432, final norm 32, head 204, skip weights 2
        assert tiny_model.parameter_count() == 208 + 272 + 2 * 3280 + 4432 + 32 + 204 + 2 == 11710

    @pytest.mark.parametrize("cfg", [ModelConfig(), ModelConfig(dim=32, heads=2, enc_layers=3, dec_layers=3),
                                     ModelConfig(dim=384, heads=6, enc_layers=12, dec_layers=4, patch=2)])
    def test_formula(self, cfg):
        model = RandSAC(cfg)
        assert model.parameter_count() == expected_parameter_count(cfg)

    def test_init(self, tiny_model):
        p = tiny_model.params
        np.testing.assert_array_equal(p["skip.weight"].data, [[0.0, 1.0]])
        assert np.all(p["enc.0.norm1.weight"].data == 1) and np.all(p["head.bias"].data == 0)
        limit = np.sqrt(6 / (16 + 64))
        assert np.abs(p["enc.0.mlp.fc1.weight"].data).max() <= limit


class TestShapes:
    def test_encoder_trace(self, tiny_model, rng):
        imgs = rng.random((3, 8, 8, 3))
        trace = tiny_model.encode(tiny_model.embed(tiny_model.tokens(imgs)), None)
        assert len(trace.hidden) == 2
        assert all(h.shape == (3, 16, 16) for h in trace.hidden)

    def test_prediction_shape(self, tiny_model, rng):
        ranks = sample_ranks(rng, tiny_model.config, 3)
        assert tiny_model.predict(rng.random((3, 8, 8, 3)), ranks).shape == (3, 16, 12)

    def test_rank_shape_checked(self, tiny_model, rng):
        with pytest.raises(ConfigurationError):
            tiny_model.predict(rng.random((2, 8, 8, 3)), np.zeros((2, 15), int))


class TestSkipMemory:
    def test_one_hot_is_last_layer(self, tiny_model, rng):
        trace = tiny_model.encode(tiny_model.embed(tiny_model.tokens(rng.random((2, 8, 8, 3)))), None)
        np.testing.assert_array_equal(tiny_model.skip_memory(trace)[0].data, trace.hidden[-1].data)

    def test_half_half_is_mean(self, tiny_model, rng):
        tiny_model.params["skip.weight"].data[:] = 0.5
        trace = tiny_model.encode(tiny_model.embed(tiny_model.tokens(rng.random((2, 8, 8, 3)))), None)
        expected = (trace.hidden[0].data + trace.hidden[1].data) / 2
        np.testing.assert_allclose(tiny_model.skip_memory(trace)[0].data, expected, atol=1e-6)

    def test_skip_weight_gradient(self):
        model, images, ranks = tiny_problem(seed=3)
        w = model.params["skip.weight"]
        assert T.grad_check(lambda: model.forward_pretrain(images, ranks), [w]) < 1e-4


class TestReference:
    def test_float64_matches_numpy_reference(self, rng):
        model = RandSAC(ModelConfig(dim=32, heads=4, enc_layers=3, dec_layers=2, dtype="float64"), seed=2)
        images = rng.random((3, 32, 32, 3))
        ranks = sample_ranks(rng, model.config, 3, PartitionSpec("blob", "random", levels=(11, 5)))
        np.testing.assert_allclose(model.predict(images, ranks).data, reference_predict(model, images, ranks),
                                   atol=1e-10)

    def test_all_true_mask_is_unmasked(self, tiny_model, rng):
        x = tiny_model.embed(tiny_model.tokens(rng.random((2, 8, 8, 3))))
        full = np.ones((16, 16), bool)
        a = tiny_model.encode(x, full).hidden[-1].data
        b = tiny_model.encode(x, None).hidden[-1].data
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestCausality:
    @pytest.mark.parametrize("dtype", ["float32", "float64"])
    def test_no_leakage(self, dtype, rng):
        cfg = ModelConfig(dim=16, heads=2, enc_layers=2, dec_layers=2, patch=2, image_size=(8, 8), dtype=dtype)
        model = RandSAC(cfg, seed=1)
        model.params["skip.weight"].data[:] = rng.normal(size=(2, 2))
        for _ in range(40):
            images = rng.random((1, 8, 8, 3))
            ranks = sample_ranks(rng, cfg, 1)
            r = int(rng.integers(1, ranks.max() + 1))
            later = ranks >= r
            changed = perturb_tokens(model, images, later, rng)
            base, pert = model.predict(images, ranks).data, model.predict(changed, ranks).data
            keep = ranks[0] <= r
            np.testing.assert_array_equal(base[0, keep], pert[0, keep])
            src = source_mask_from_ranks(ranks)
            h0 = model.encode(model.embed(model.tokens(images)), src).hidden
            changed = perturb_tokens(model, images, ranks > r, rng)
            h1 = model.encode(model.embed(model.tokens(changed)), src).hidden
            for a, b in zip(h0, h1):
                np.testing.assert_array_equal(a.data[0, keep], b.data[0, keep])

    def test_first_segment_sees_itself(self, tiny_model, rng):
        images = rng.random((1, 8, 8, 3))
        ranks = sample_ranks(rng, tiny_model.config, 1)
        first = ranks == 0
        changed = perturb_tokens(tiny_model, images, first, rng)
        a = tiny_model.predict(images, ranks).data[0, first[0]]
        b = tiny_model.predict(changed, ranks).data[0, first[0]]
        assert not np.array_equal(a, b)


class TestLoss:
    def test_forced_predictions_give_zero(self, tiny_model, rng, monkeypatch):
        images = rng.random((2, 8, 8, 3))
        ranks = sample_ranks(rng, tiny_model.config, 2)
        for mode in ("raw", "norm"):
            target = tiny_model.targets(images, mode)
            monkeypatch.setattr(tiny_model, "predict", lambda im, rk, t=target: Tensor(t))
            assert float(tiny_model.forward_pretrain(images, ranks, mode).data) == 0.0

    def test_zero_model_closed_form(self, tiny_model, rng):
        for p in tiny_model.params.values():
            p.data[:] = 0
        images = np.full((2, 8, 8, 3), 0.25)
        ranks = sample_ranks(rng, tiny_model.config, 2)
        target = tiny_model.targets(images, "raw")
        loss = float(tiny_model.forward_pretrain(images, ranks).data)
        np.testing.assert_allclose(loss, (target.astype(np.float64) ** 2).mean(), rtol=1e-6)

    def test_first_segment_exclusion(self, tiny_model, rng):
        images = rng.random((2, 8, 8, 3))
        ranks = sample_ranks(rng, tiny_model.config, 2)
        pred = tiny_model.predict(images, ranks).data.astype(np.float64)
        err = ((pred - tiny_model.targets(images, "raw")) ** 2).mean(-1)
        loss = float(tiny_model.forward_pretrain(images, ranks, exclude_first_segment=True).data)
        np.testing.assert_allclose(loss, err[ranks > 0].mean(), rtol=1e-5)

    def test_non_finite_loss_raises(self, tiny_model, rng):
        tiny_model.params["head.bias"].data[0] = np.nan
        with pytest.raises(DivergenceError):
            tiny_model.forward_pretrain(rng.random((1, 8, 8, 3)), sample_ranks(rng, tiny_model.config, 1))

    def test_unknown_loss_mode(self, tiny_model, rng):
        with pytest.raises(ConfigurationError):
            tiny_model.targets(rng.random((1, 8, 8, 3)), "perceptual")


class TestFeatures:
    def test_deterministic_and_sized(self, rng):
        model = RandSAC(ModelConfig(), seed=0)
        images = rng.random((5, 32, 32, 3)).astype(np.float32)
        a = model.extract_features(images, batch_size=2)
        b = model.extract_features(images)
        assert a.shape == (5, 64)
        np.testing.assert_array_equal(a, model.extract_features(images, batch_size=2))
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_no_graph_recorded(self, tiny_model, rng):
        tiny_model.extract_features(rng.random((2, 8, 8, 3)))
        assert all(p.grad is None for p in tiny_model.params.values())

    def test_astype_preserves_values(self, tiny_model):
        m64 = tiny_model.astype("float64")
        assert m64.params["head.weight"].dtype == np.float64
        np.testing.assert_array_equal(m64.params["head.weight"].data, tiny_model.params["head.weight"].data)
