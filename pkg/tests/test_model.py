import numpy as np
import numpy.testing as npt
import pytest

import oracles
from sanet import tensor as T
from sanet.config import ConfigError
from sanet.losses import LossWeights, SegTargets, loss_total
from sanet.model import (MODEL_NAMES, ModelCfg, ModelOutputs, SegModel,
                         build_model, parse_model_name, predict_labels)
from sanet.params import ParamStore
from sanet.tensor import ShapeError, Tensor, UsageError


def desk_model(name, seed=0, **kw):
    store = ParamStore(seed=seed)
    return store, build_model(store, name, **kw)


def image_batch(rng, n=2, size=64):
    return Tensor(rng.normal(size=(n, 3, size, size)).astype(np.float32))


class TestNaming:
    def test_all_nine_names_parse(self):
        assert len(MODEL_NAMES) == 9
        for name in MODEL_NAMES:
            family, variant = parse_model_name(name)
            assert f"{family}-{variant}" == name

    def test_unknown_name_rejected(self):
        for bad in ("resnet50", "sanet", "sanet-desk-big", "se-desk"):
            with pytest.raises(ConfigError):
                parse_model_name(bad)

    def test_desk_defaults(self):
        cfg = ModelCfg.from_name("sanet-desk")
        assert (cfg.classes, cfg.sa_ratio) == (3, 2)

    def test_catalog_defaults(self):
        cfg = ModelCfg.from_name("sanet-resnet101")
        assert (cfg.classes, cfg.sa_ratio) == (21, 8)

    def test_invalid_settings_rejected(self):
        with pytest.raises(ConfigError):
            ModelCfg.from_name("fcn-desk", classes=1)
        with pytest.raises(ConfigError):
            ModelCfg.from_name("sanet-desk", sa_ratio=0)

    def test_name_round_trip(self):
        assert ModelCfg.from_name("fcn-se-desk").name == "fcn-se-desk"


class TestForwardShapes:
    def test_attention_model_outputs(self, rng):
        _, model = desk_model("sanet-desk")
        out = model.forward(image_batch(rng))
        assert out.y_den.shape == (2, 3, 8, 8)
        assert out.y_mask.shape == (2, 3, 8, 8)
        assert out.y_cat.shape == (2, 3, 1, 1)
        assert out.y_sa4.shape == (2, 3, 8, 8)
        assert out.y_final.shape == (2, 3, 64, 64)
        assert len(out.sa_maps) == 4
        head_dims = [maps[1].shape[2] for maps in out.sa_maps]
        assert head_dims == [16, 8, 8, 8]

    def test_baseline_outputs(self, rng):
        for name in ("fcn-desk", "fcn-se-desk"):
            _, model = desk_model(name)
            out = model.forward(image_batch(rng, n=1))
            assert out.y_den.shape == (1, 3, 8, 8)
            assert out.y_final.shape == (1, 3, 64, 64)
            assert out.y_mask is None and out.y_cat is None
            assert out.y_sa4 is None and out.sa_maps is None

    def test_final_probabilities_sum_to_one(self, rng):
        for name in ("fcn-desk", "sanet-desk"):
            _, model = desk_model(name)
            out = model.forward(image_batch(rng, n=1))
            sums = out.y_final.data.sum(axis=1)
            npt.assert_allclose(sums, 1.0, atol=1e-5)

    def test_rectangular_input(self, rng):
        _, model = desk_model("sanet-desk")
        x = Tensor(rng.normal(size=(1, 3, 32, 48)).astype(np.float32))
        out = model.forward(x)
        assert out.y_final.shape == (1, 3, 32, 48)

    def test_training_without_rng_rejected(self, rng):
        _, model = desk_model("sanet-desk")
        with pytest.raises(UsageError):
            model.forward(image_batch(rng, n=1), training=True)

    def test_eval_forward_is_deterministic(self, rng):
        _, model = desk_model("sanet-desk")
        x = image_batch(rng, n=1)
        a = model.forward(x).y_final.data
        b = model.forward(x).y_final.data
        npt.assert_array_equal(a, b)


class TestPredictionAlgebra:
    def test_zeroed_fourth_head_reduces_to_dense_prediction(self, rng):
        store, model = desk_model("sanet-desk")
        store.tensor("head4.cls.w").data[...] = 0.0
        out = model.forward(image_batch(rng, n=1))
        npt.assert_array_equal(out.y_sa4.data, 0.0)
        expected = T.bilinear_upsample(
            T.softmax_channels(Tensor(out.y_den.data)), 8).data
        npt.assert_array_equal(out.y_final.data, expected)

    def test_zeroed_heads_give_uniform_prediction(self, rng):
        store, model = desk_model("fcn-desk")
        store.tensor("den.conv.w").data[...] = 0.0
        out = model.forward(image_batch(rng, n=1))
        npt.assert_allclose(out.y_final.data, 1.0 / 3.0, atol=1e-7)

    def test_argmax_matches_loop_oracle(self, rng):
        probs = rng.uniform(size=(2, 3, 6, 6)).astype(np.float32)
        outputs = ModelOutputs(y_den=None, y_final=Tensor(probs))
        npt.assert_array_equal(predict_labels(outputs),
                               oracles.argmax_labels(probs))

    def test_argmax_ties_go_to_lower_class(self):
        probs = np.full((1, 3, 2, 2), 0.25, dtype=np.float32)
        probs[0, 1:] = 0.375
        outputs = ModelOutputs(y_den=None, y_final=Tensor(probs))
        npt.assert_array_equal(predict_labels(outputs), 1)


class TestGradientFlow:
    def test_every_head_receives_gradient(self, rng):
        store, model = desk_model("sanet-desk")
        x = Tensor(rng.normal(size=(2, 3, 32, 32)).astype(np.float32))
        labels = rng.integers(0, 3, size=(2, 32, 32))
        out = model.forward(x, training=True, rng=np.random.default_rng(0))
        total, *_ = loss_total(out.y_mask, out.y_cat, out.y_den,
                               SegTargets.from_labels(labels, 3),
                               LossWeights())
        total.backward()
        probes = ["head1.sa.main.conv1.w", "head2.sa.attn.conv1.w",
                  "head3.sa.attn.conv2.w", "head4.cls.w", "fuse.w", "cat.w",
                  "den.conv1.w", "den.conv2.w", "backbone.stem.w"]
        for name in probes:
            g = store.tensor(name).grad
            assert g is not None and float(np.abs(g).max()) > 0.0, name


class TestConfigPlumbing:
    def test_mask_activation_and_pool_forwarded(self):
        _, model = desk_model("sanet-desk", sa_activation="relu",
                              sa_pool="max")
        for _, sa, _ in model.sa_heads:
            assert sa.cfg.activation == "relu"
            assert sa.cfg.pool_kind == "max"

    def test_invalid_mask_activation_rejected(self):
        with pytest.raises(ShapeError):
            desk_model("sanet-desk", sa_activation="tanh")

    def test_custom_class_count(self, rng):
        _, model = desk_model("sanet-desk", classes=5)
        out = model.forward(image_batch(rng, n=1))
        assert out.y_final.shape[1] == 5
