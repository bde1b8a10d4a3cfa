import numpy as np
import numpy.testing as npt
import pytest

import oracles
from conftest import rel_err
from sanet.blocks import (ResidualBlock, ResidualBlockCfg, SABlock, SABlockCfg,
                          SEBlock, SEBlockCfg)
from sanet.params import ParamStore
from sanet.tensor import ShapeError, Tensor


def rand_input(rng, n, c, hw):
    return Tensor(rng.normal(size=(n, c, hw, hw)).astype(np.float32))


def arrays(store):
    return {name: arr for name, arr, _ in store.named_arrays()}


def randomize_buffers(store, rng):
    """Give running stats non-trivial values so eval mode actually uses them."""
    for name, arr, trainable in store.named_arrays():
        if trainable:
            continue
        if name.endswith(".rmean"):
            arr[...] = 0.1 * rng.normal(size=arr.shape)
        elif name.endswith(".rvar"):
            arr[...] = 0.5 + rng.uniform(size=arr.shape)


def np_norm_eval(x, p, name, eps=1e-5):
    gamma = p[name + ".gamma"].reshape(1, -1, 1, 1)
    beta = p[name + ".beta"].reshape(1, -1, 1, 1)
    rm = p[name + ".rmean"].reshape(1, -1, 1, 1)
    rv = p[name + ".rvar"].reshape(1, -1, 1, 1)
    return (x - rm) / np.sqrt(rv + eps) * gamma + beta


def np_conv(x, p, name, stride=1, padding=0, dilation=1, groups=1):
    return oracles.conv2d(x, p[name + ".w"], p[name + ".b"].reshape(-1),
                          stride, padding, dilation, groups)


def np_conv_pair(x, p, name, dilation=1, groups_first=1):
    y = np_conv(x, p, name + ".conv1", padding=dilation, dilation=dilation,
                groups=groups_first)
    y = np.maximum(np_norm_eval(y, p, name + ".norm1"), 0.0)
    y = np_conv(y, p, name + ".conv2", padding=dilation, dilation=dilation)
    return np_norm_eval(y, p, name + ".norm2")


class TestResidualBlock:
    def test_zero_f_is_identity(self, rng):
        store = ParamStore(seed=0)
        block = ResidualBlock(store, "res", ResidualBlockCfg(8, 4, 8))
        store.tensor("res.f.conv2.w").data[...] = 0.0
        x = rand_input(rng, 2, 8, 6)
        for training in (True, False):
            npt.assert_array_equal(block.forward(x, training).data, x.data)

    def test_projection_added_only_when_dims_change(self):
        plain = ParamStore(seed=0)
        ResidualBlock(plain, "r", ResidualBlockCfg(8, 4, 8))
        assert not any("proj" in n for n in plain.names())
        widened = ParamStore(seed=0)
        ResidualBlock(widened, "r", ResidualBlockCfg(8, 4, 16))
        assert "r.proj.w" in widened.names()
        strided = ParamStore(seed=0)
        ResidualBlock(strided, "r", ResidualBlockCfg(8, 4, 8, stride=2))
        assert "r.proj.w" in strided.names()

    def test_stride_halves_spatial_dims(self, rng):
        store = ParamStore(seed=0)
        block = ResidualBlock(store, "r", ResidualBlockCfg(4, 4, 8, stride=2))
        out = block.forward(rand_input(rng, 1, 4, 8), False)
        assert out.shape == (1, 8, 4, 4)

    def test_mismatched_paths_raise(self, rng):
        store = ParamStore(seed=0)
        block = ResidualBlock(store, "r",
                              ResidualBlockCfg(4, 4, 8, projection=False))
        with pytest.raises(ShapeError):
            block.forward(rand_input(rng, 1, 4, 6), False)

    def test_matches_numpy_composition(self, rng):
        store = ParamStore(seed=3)
        block = ResidualBlock(store, "r", ResidualBlockCfg(6, 4, 8, dilation=2))
        randomize_buffers(store, rng)
        x = rand_input(rng, 2, 6, 8)
        got = block.forward(x, False).data
        p = arrays(store)
        shortcut = np_norm_eval(np_conv(x.data, p, "r.proj"), p, "r.proj_norm")
        want = shortcut + np_conv_pair(x.data, p, "r.f", dilation=2)
        assert rel_err(got, want) < 1e-5

    def test_parameter_names_are_stable(self):
        store = ParamStore(seed=0)
        ResidualBlock(store, "r", ResidualBlockCfg(4, 4, 4))
        assert store.names() == [
            "r.f.conv1.w", "r.f.conv1.b",
            "r.f.norm1.gamma", "r.f.norm1.beta",
            "r.f.norm1.rmean", "r.f.norm1.rvar",
            "r.f.conv2.w", "r.f.conv2.b",
            "r.f.norm2.gamma", "r.f.norm2.beta",
            "r.f.norm2.rmean", "r.f.norm2.rvar",
        ]


class TestSEBlock:
    def test_channel_weights_in_unit_interval(self, rng):
        store = ParamStore(seed=1)
        block = SEBlock(store, "se", SEBlockCfg(c_in=8, c_mid=4))
        w = block.channel_weights(rand_input(rng, 2, 8, 6)).data
        assert w.shape == (2, 8, 1, 1)
        assert np.all((w > 0.0) & (w < 1.0))

    def test_squeeze_path_width(self):
        store = ParamStore(seed=1)
        SEBlock(store, "se", SEBlockCfg(c_in=8, c_mid=4))
        assert store.tensor("se.fc1.w").shape == (4, 8, 1, 1)
        assert store.tensor("se.fc2.w").shape == (8, 4, 1, 1)

    def test_neutral_gate_halves_input(self, rng):
        # zeroed fc2 gives sigmoid(0) = 1/2 exactly; zeroed F isolates the gate
        store = ParamStore(seed=1)
        block = SEBlock(store, "se", SEBlockCfg(c_in=8, c_mid=4))
        store.tensor("se.fc2.w").data[...] = 0.0
        store.tensor("se.f.conv2.w").data[...] = 0.0
        x = rand_input(rng, 2, 8, 6)
        out = block.forward(x, False)
        npt.assert_array_equal(out.data, np.float32(0.5) * x.data)

    def test_matches_numpy_composition(self, rng):
        store = ParamStore(seed=4)
        block = SEBlock(store, "se", SEBlockCfg(c_in=8, c_mid=4, dilation=2))
        randomize_buffers(store, rng)
        x = rand_input(rng, 2, 8, 8)
        got = block.forward(x, False).data
        p = arrays(store)
        s = x.data.mean(axis=(2, 3), keepdims=True)
        s = np.maximum(np.einsum("mc,ncij->nmij", p["se.fc1.w"][:, :, 0, 0],
                                 s) + p["se.fc1.b"].reshape(1, -1, 1, 1), 0.0)
        s = np.einsum("mc,ncij->nmij", p["se.fc2.w"][:, :, 0, 0], s) \
            + p["se.fc2.b"].reshape(1, -1, 1, 1)
        gate = 1.0 / (1.0 + np.exp(-s))
        want = gate * x.data + np_conv_pair(x.data, p, "se.f", dilation=2)
        assert rel_err(got, want) < 1e-5


def rigged_sa(rng, c_in=8, ratio=2, mask_value=None):
    """SA block with a relu mask and attn logits forced to a constant."""
    store = ParamStore(seed=int(rng.integers(1 << 30)))
    block = SABlock(store, "sa",
                    SABlockCfg(c_in=c_in, ratio=ratio, activation="relu"))
    if mask_value is not None:
        store.tensor("sa.attn.conv2.w").data[...] = 0.0
        store.tensor("sa.attn.conv2.b").data[...] = mask_value
    return store, block


class TestSABlock:
    def test_returns_mask_features_and_output(self, rng):
        store = ParamStore(seed=2)
        block = SABlock(store, "sa", SABlockCfg(c_in=8, ratio=2))
        x = rand_input(rng, 2, 8, 8)
        out, attn, res = block.forward(x, False)
        assert out.shape == attn.shape == res.shape == (2, 8, 8, 8)
        assert np.all((attn.data > 0.0) & (attn.data < 1.0))

    def test_zero_attention_zeroes_output(self, rng):
        for _ in range(10):
            store, block = rigged_sa(rng, mask_value=0.0)
            x = rand_input(rng, 1, 8, 8)
            out, attn, _ = block.forward(x, False)
            npt.assert_array_equal(attn.data, 0.0)
            npt.assert_array_equal(out.data, 0.0)

    def test_unit_attention_shifts_features_by_one(self, rng):
        for _ in range(10):
            store, block = rigged_sa(rng, mask_value=1.0)
            x = rand_input(rng, 1, 8, 8)
            out, attn, res = block.forward(x, False)
            npt.assert_array_equal(attn.data, 1.0)
            npt.assert_array_equal(out.data,
                                   res.data + np.float32(1.0))

    def test_grouped_first_convs(self):
        store = ParamStore(seed=2)
        SABlock(store, "sa", SABlockCfg(c_in=8, ratio=2))
        assert store.tensor("sa.main.conv1.w").shape == (2, 4, 3, 3)
        assert store.tensor("sa.attn.conv1.w").shape == (2, 4, 3, 3)

    def test_indivisible_spatial_dims_raise(self, rng):
        store = ParamStore(seed=2)
        block = SABlock(store, "sa", SABlockCfg(c_in=8, ratio=4))
        with pytest.raises(ShapeError):
            block.forward(rand_input(rng, 1, 8, 6), False)

    @pytest.mark.parametrize("kwargs", [
        {"c_in": 6, "reduction": 4},          # width not divisible
        {"c_in": 8, "ratio": 0},              # degenerate pool
        {"c_in": 8, "pool_kind": "median"},   # unknown pool
        {"c_in": 8, "activation": "tanh"},    # unknown mask activation
        {"c_in": 4, "reduction": 4},          # mid width below group count
    ])
    def test_bad_configs_rejected(self, kwargs):
        with pytest.raises(ShapeError):
            SABlockCfg(**kwargs)

    def test_pool_kinds_change_the_mask(self, rng):
        x = rand_input(rng, 1, 8, 8)
        masks = {}
        for kind in ("avg", "max"):
            store = ParamStore(seed=6)
            block = SABlock(store, "sa",
                            SABlockCfg(c_in=8, ratio=2, pool_kind=kind))
            masks[kind] = block.forward(x, False)[1].data
        assert not np.array_equal(masks["avg"], masks["max"])

    def test_matches_numpy_composition(self, rng):
        store = ParamStore(seed=5)
        block = SABlock(store, "sa", SABlockCfg(c_in=8, ratio=2))
        randomize_buffers(store, rng)
        x = rand_input(rng, 2, 8, 8)
        got_out, got_attn, got_res = block.forward(x, False)
        p = arrays(store)
        res = np_conv_pair(x.data, p, "sa.main", groups_first=2)
        a = oracles.avg_pool2d(x.data, 2, 2)
        a = np_conv(a, p, "sa.attn.conv1", padding=1, groups=2)
        a = np.maximum(np_norm_eval(a, p, "sa.attn.norm"), 0.0)
        a = np_conv(a, p, "sa.attn.conv2", padding=1)
        attn = oracles.bilinear_upsample(1.0 / (1.0 + np.exp(-a)), 2)
        assert rel_err(got_res.data, res) < 1e-5
        assert rel_err(got_attn.data, attn) < 1e-5
        assert rel_err(got_out.data, attn * res + attn) < 1e-5
