"""Tests for the parameter store, conv/DenseNet/gated blocks and the encoder/decoder."""

import numpy as np
import pytest

from mtfatt import tensor as tn
from mtfatt.config import ModelConfig
from mtfatt.layers import (
    ConvBlock,
    Decoder,
    DenseNetBlock,
    Encoder,
    GatedBlock,
    LayerSpec,
    ParameterStore,
    conv_block_params,
    decoder_params,
    densenet_params,
    encoder_params,
    shape_ledger,
    layer_plan,
)
from mtfatt.tensor import DimensionError, Tensor


def store64(seed=0):
    return ParameterStore(seed=seed, dtype="float64", bn_momentum=0.9)


class TestLayerPlan:
    """Test the encoder/decoder plan and its shape walk."""

    def test_plan_rows(self):
        """Test stage order, kinds and strides of the full-scale plan."""
        plan = layer_plan(ModelConfig.full_scale())
        assert [stage for stage, _ in plan] == ["EB1"] * 2 + ["EB2"] * 2 + ["EB3"] * 2 + ["DB1"] * 3 + ["DB2"] * 3 + ["DB3"] * 3 + ["head"] * 2
        strides = {(stage, spec.kind): spec.stride for stage, spec in plan if spec.kind in ("conv2d_block", "conv2d_transpose")}
        assert strides[("EB2", "conv2d_block")] == (2, 2)
        assert strides[("EB3", "conv2d_block")] == (1, 2)
        assert strides[("DB1", "conv2d_transpose")] == (1, 2)
        assert strides[("DB2", "conv2d_transpose")] == (2, 2)
        assert strides[("DB3", "conv2d_transpose")] == (1, 1)

    def test_full_scale_ledger(self):
        """Test the full-scale shape walk from 240x1024x16 input to a 16-channel head."""
        ledger = shape_ledger(ModelConfig.full_scale())
        assert ledger[0][2] == (240, 1024, 16)
        outputs = {(stage, spec.kind): out for stage, spec, _, out in ledger}
        assert outputs[("EB1", "conv2d_block")] == (240, 1024, 32)
        assert outputs[("EB2", "conv2d_block")] == (120, 512, 64)
        assert outputs[("EB3", "conv2d_block")] == (120, 256, 64)
        assert outputs[("DB1", "conv2d_transpose")] == (120, 512, 64)
        assert outputs[("DB2", "conv2d_transpose")] == (240, 1024, 64)
        assert outputs[("DB3", "conv2d_transpose")] == (240, 1024, 32)
        assert ledger[-1][3] == (240, 1024, 16)

    def test_odd_sizes_round_up(self):
        """Test that strided rows produce ceil(in / stride) on odd sizes."""
        ledger = shape_ledger(ModelConfig.tiny(segment_frames=15))
        outputs = {(stage, spec.kind): out for stage, spec, _, out in ledger}
        assert outputs[("EB2", "conv2d_block")][0] == 8
        assert outputs[("DB2", "conv2d_transpose")][0] == 15

    def test_unknown_kind(self):
        """Test that a LayerSpec validates its kind and width."""
        with pytest.raises(ValueError):
            LayerSpec("lstm", 8)
        with pytest.raises(ValueError):
            LayerSpec("densenet", 0)


class TestParameterStore:
    """Test parameter registration, determinism and state loading."""

    def test_duplicate_name(self):
        """Test that registering a name twice is rejected."""
        store = store64()
        store.zeros("a", (2,))
        with pytest.raises(ValueError):
            store.ones("a", (2,))

    def test_same_seed_same_values(self):
        """Test that identical seeds and layer sequences give identical parameters."""
        a, b = store64(5), store64(5)
        ConvBlock(a, "c", 3, 4)
        ConvBlock(b, "c", 3, 4)
        for (name_a, pa), (name_b, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert name_a == name_b
            np.testing.assert_array_equal(pa.data, pb.data)
        assert not np.array_equal(ConvBlock(store64(6), "c", 3, 4).weight.data, a.params["c.weight"].data)

    def test_he_uniform_bound(self):
        """Test the sqrt(6 / fan_in) bound."""
        w = store64().he_uniform("w", (3, 3, 4, 8), fan_in=36)
        assert np.abs(w.data).max() <= np.sqrt(6.0 / 36)
        assert w.requires_grad and w.dtype == np.float64

    def test_state_arrays_round_trip(self):
        """Test that loaded arrays replace parameters and running statistics."""
        source, target = store64(1), store64(2)
        ConvBlock(source, "c", 2, 3)
        ConvBlock(target, "c", 2, 3)
        source.bn_states["c.bn"].mean = np.array([1.0, 2.0, 3.0])
        target.load_arrays(source.state_arrays())
        for name, value in source.state_arrays().items():
            np.testing.assert_array_equal(target.state_arrays()[name], value)
        assert "c.bn.running_var" in target.state_arrays()

    def test_load_missing_name(self):
        """Test that missing arrays raise KeyError."""
        store = store64()
        ConvBlock(store, "c", 2, 3)
        arrays = store.state_arrays()
        del arrays["c.weight"]
        with pytest.raises(KeyError):
            store.load_arrays(arrays)

    def test_load_wrong_shape(self):
        """Test that a mismatched shape raises DimensionError."""
        store = store64()
        ConvBlock(store, "c", 2, 3)
        arrays = dict(store.state_arrays())
        arrays["c.weight"] = np.zeros((1, 1, 2, 3))
        with pytest.raises(DimensionError):
            store.load_arrays(arrays)


class TestBlocks:
    """Test the conv, DenseNet and gated blocks."""

    def test_conv_block_output(self, rng):
        """Test shape, parameter count and the ELU lower bound."""
        store = store64()
        block = ConvBlock(store, "c", 3, 5, (3, 3), (2, 2))
        y = block(Tensor(rng.standard_normal((7, 9, 3)), dtype="float64"))
        assert y.shape == (4, 5, 5)
        assert y.data.min() >= -1.0
        assert store.count() == conv_block_params(3, 5, 3)

    def test_sigmoid_gate_range(self, rng):
        """Test that the gate activation lies in (0, 1)."""
        block = ConvBlock(store64(), "g", 3, 3, (1, 1), activation="sigmoid")
        y = block(Tensor(rng.standard_normal((4, 4, 3)), dtype="float64")).data
        assert y.min() > 0.0 and y.max() < 1.0

    def test_unknown_activation(self):
        """Test that only ELU and sigmoid are supported."""
        with pytest.raises(ValueError):
            ConvBlock(store64(), "c", 3, 3, activation="relu")

    def test_densenet_input_widths(self, rng):
        """Test that block i sees the input plus i growth-width outputs."""
        store = store64()
        block = DenseNetBlock(store, "d", 16, LayerSpec("densenet", 4))
        assert block.input_widths == [16, 20, 24, 28]
        assert block(Tensor(rng.standard_normal((5, 6, 16)), dtype="float64")).shape == (5, 6, 4)
        assert store.count() == densenet_params(16, 4)

    def make_gated(self):
        store = store64()
        gated = GatedBlock(store, "g", 4, 3, LayerSpec("conv2d_transpose", 4, (3, 3), (2, 2)), LayerSpec("gated", 4, (1, 1)))
        return store, gated

    def force_gate(self, gated, level):
        gated.gate.gamma.data = np.zeros_like(gated.gate.gamma.data)
        gated.gate.beta.data = np.full_like(gated.gate.beta.data, level)

    def test_closed_gate_blocks_skip(self, rng):
        """Test that a gate forced shut makes the output independent of the skip."""
        _, gated = self.make_gated()
        self.force_gate(gated, -50.0)
        x = Tensor(rng.standard_normal((3, 3, 4)), dtype="float64")
        first = gated(x, Tensor(rng.standard_normal((6, 5, 3)), dtype="float64")).data
        second = gated(x, Tensor(rng.standard_normal((6, 5, 3)) * 10.0, dtype="float64")).data
        np.testing.assert_allclose(first, second, atol=1e-9)

    def test_open_gate_passes_skip(self, rng):
        """Test that a gate forced open fuses the upsampled feature with the unmodified skip."""
        store, gated = self.make_gated()
        store.training = False
        self.force_gate(gated, 50.0)
        x = Tensor(rng.standard_normal((3, 3, 4)), dtype="float64")
        skip = Tensor(rng.standard_normal((6, 5, 3)), dtype="float64")
        expected = gated.fuse(tn.concat([gated.upsample(x, (6, 5)), skip], axis=-1)).data
        np.testing.assert_allclose(gated(x, skip).data, expected, atol=1e-9)

    def test_gated_skip_channels(self, rng):
        """Test that a skip with the wrong channel count is rejected."""
        _, gated = self.make_gated()
        with pytest.raises(DimensionError):
            gated(Tensor(np.zeros((3, 3, 4))), Tensor(np.zeros((6, 5, 2))))

    def test_gated_rows(self):
        """Test that GatedBlock needs a transpose row and a gated row."""
        with pytest.raises(ValueError):
            GatedBlock(store64(), "g", 4, 3, LayerSpec("densenet", 4), LayerSpec("gated", 4))


class TestEncoderDecoder:
    """Test the three-stage encoder and gated decoder."""

    def test_encoder_shapes(self, rng, tiny_config):
        """Test bottleneck and skip shapes on the tiny config."""
        store = ParameterStore.for_config(tiny_config)
        out = Encoder(store, tiny_config)(Tensor(rng.standard_normal((16, 16, 8)), dtype="float64"))
        assert out.bottleneck.shape == tiny_config.bottleneck_shape == (8, 4, 4)
        assert [s.shape for s in out.skips] == [(8, 8, 4), (16, 16, 4), (16, 16, 8)]
        assert store.count() == encoder_params(tiny_config)

    def test_encoder_channel_check(self, tiny_config):
        """Test that input channels other than 4K are rejected."""
        encoder = Encoder(ParameterStore.for_config(tiny_config), tiny_config)
        with pytest.raises(DimensionError):
            encoder(Tensor(np.zeros((16, 16, 6)), dtype="float64"))

    def test_decoder_mask(self, rng, tiny_config):
        """Test mask shape and the [-2, 2] bound of the tanh head."""
        store = ParameterStore.for_config(tiny_config)
        encoder, decoder = Encoder(store, tiny_config), Decoder(store, tiny_config)
        out = encoder(Tensor(rng.standard_normal((16, 16, 8)) * 5.0, dtype="float64"))
        mask = decoder(out.bottleneck, out.skips)
        assert mask.shape == (16, 16, 8)
        assert np.abs(mask.data).max() <= tiny_config.mask_factor

    def test_decoder_parameter_count(self, tiny_config):
        """Test the analytic decoder parameter count."""
        store = ParameterStore.for_config(tiny_config)
        Decoder(store, tiny_config)
        assert store.count() == decoder_params(tiny_config)

    def test_decoder_needs_three_skips(self, rng, tiny_config):
        """Test that the decoder checks the skip count."""
        decoder = Decoder(ParameterStore.for_config(tiny_config), tiny_config)
        with pytest.raises(DimensionError):
            decoder(Tensor(np.zeros((8, 4, 4))), [])
