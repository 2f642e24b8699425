import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualdis import layers as L

APPENDIX_STRINGS = [
    # encoder/decoder tables across the three architecture presets
    "32p0s2", "32p0s1", "64p0", "maxpool2k3", "80k1", "96p0", "128p0", "160p0s2", "196p0",
    "dec392p0s1", "392", "upsample", "256", "196", "128", "96", "64", "32", "3k1",
    "32k4s2", "40k4s2", "48k4s2", "76k4s2", "100k3p0", "64k4s2", "72k3p0", "80k2p0",
    "160k2p1", "dec80", "dec64", "dec48", "dec32", "3none",
    "96k4s2", "164k4s2", "192k4s2", "128k3p0", "128k2p0", "256k2p1", "dec192", "dec128", "dec96", "1",
    "dec128k4",
    "l2000", "l40", "l256", "l38", "l14", "l80", "l128", "l5", "l8",
]


class TestParser:
    @pytest.mark.parametrize("token", APPENDIX_STRINGS)
    def test_round_trip(self, token):
        spec = L.parse_layer(token)
        assert L.parse_layer(L.format_layer(spec)) == spec

    def test_unicode_ell_accepted_as_l(self):
        assert L.parse_layer("ℓ38") == L.parse_layer("l38")

    def test_conv_defaults(self):
        spec = L.parse_layer("128")
        assert (spec.kernel, spec.stride, spec.padding) == (3, 1, 1)

    def test_deconv_defaults(self):
        spec = L.parse_layer("dec128")
        assert (spec.kernel, spec.stride, spec.padding) == (4, 2, 1)
        assert L.parse_layer("dec128k4") == spec

    def test_maxpool_fields(self):
        spec = L.parse_layer("maxpool2k3")
        assert spec.kind == L.MAX_POOL and spec.stride == 2 and spec.kernel == 3

    def test_none_suffix(self):
        assert L.parse_layer("3none").bare

    def test_bad_tokens_rejected(self):
        for token in ["", "dec", "convk3", "l", "32k3k4", "upsample2", "maxpool2"]:
            with pytest.raises(L.LayerSyntaxError):
                L.parse_layer(token)

    @given(
        kind=st.sampled_from([L.CONV, L.TCONV]),
        out=st.integers(1, 512),
        kernel=st.integers(1, 7),
        stride=st.integers(1, 4),
        padding=st.integers(0, 5),
        bare=st.booleans(),
    )
    @settings(max_examples=200, deadline=None)
    def test_round_trip_random_specs(self, kind, out, kernel, stride, padding, bare):
        spec = L.LayerSpec(kind, out_channels=out, kernel=kernel, stride=stride, padding=padding, bare=bare)
        assert L.parse_layer(L.format_layer(spec)) == spec

    def test_stack_round_trip(self):
        text = "32k4s2, 40k4s2, 48k4s2"
        specs = L.parse_stack(text)
        assert L.parse_stack(L.format_stack(specs)) == specs


class TestShapes:
    def test_conv_shape_example(self):
        # 32 channels, k3, s2, p0 on 64x64 input
        assert L.layer_output_shape(L.parse_layer("32p0s2"), (3, 64, 64)) == (32, 31, 31)

    def test_upsample_doubles(self):
        assert L.layer_output_shape(L.parse_layer("upsample"), (7, 4, 4)) == (7, 8, 8)

    def test_too_small_input_raises(self):
        with pytest.raises(L.ShapeError):
            L.layer_output_shape(L.parse_layer("8k5p0"), (3, 3, 3))

    def test_forward_matches_arithmetic(self):
        for token, shape in [("32p0s2", (3, 64, 64)), ("dec16", (8, 4, 4)), ("maxpool2k3", (5, 13, 13))]:
            spec = L.parse_layer(token)
            layer = L.make_layer(spec, shape[0])
            out = layer(torch.randn(2, *shape))
            assert tuple(out.shape[1:]) == L.layer_output_shape(spec, shape)


class TestForwardSemantics:
    def test_relu_definition(self):
        layer = L.make_layer(L.LayerSpec(L.RELU), 1)
        assert layer(torch.tensor([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]

    def test_upsample_replicates_values(self):
        layer = L.make_layer(L.LayerSpec(L.UPSAMPLE), 1)
        x = torch.arange(4.0).reshape(1, 1, 2, 2)
        out = layer(x)
        assert out.shape == (1, 1, 4, 4)
        assert torch.equal(out[0, 0, :2, :2], torch.full((2, 2), 0.0))
        assert torch.equal(out[0, 0, 2:, 2:], torch.full((2, 2), 3.0))

    def test_eval_mode_is_deterministic_and_pure(self):
        torch.manual_seed(0)
        stack = L.build_cnn(L.parse_stack("8k4s2, 8"), 3, (16, 16), role="encoder")
        stack.train()
        stack(torch.rand(4, 3, 16, 16))  # populate running stats
        stack.eval()
        bn = [m for m in stack.modules() if isinstance(m, torch.nn.BatchNorm2d)][0]
        mean_before = bn.running_mean.clone()
        x = torch.rand(4, 3, 16, 16)
        out1 = stack(x)
        out2 = stack(x)
        assert torch.equal(out1, out2)
        assert torch.equal(bn.running_mean, mean_before)

    def test_train_mode_uses_batch_statistics(self):
        torch.manual_seed(0)
        bn = L.make_layer(L.LayerSpec(L.BATCH_NORM), 4)
        x = 3.0 + 2.0 * torch.randn(64, 4, 5, 5)
        bn.train()
        out = bn(x).detach()
        assert abs(float(out.mean())) < 1e-5

    def test_shape_error_names_layer(self):
        stack = L.build_cnn(L.parse_stack("8k4s2"), 3, (16, 16), role="encoder")
        with pytest.raises(L.ShapeError) as err:
            stack(torch.rand(2, 5, 16, 16))
        assert "8k4s2" in str(err.value)
        assert err.value.expected == (3, 16, 16)

    def test_decoder_last_layer_raw(self):
        stack = L.build_cnn(L.parse_stack("dec8, 3none"), 4, (1, 1), role="decoder")
        kinds = [type(m).__name__ for m in stack.blocks]
        assert kinds == ["ConvTranspose2d", "BatchNorm2d", "LeakyReLU", "Conv2d"]

    def test_mlp_relu_between_layers_only(self):
        mlp = L.build_mlp(L.parse_stack("l8, l8, l5"), 4)
        kinds = [type(m).__name__ for m in mlp.blocks]
        assert kinds == ["Linear", "ReLU", "Linear", "ReLU", "Linear"]


class TestBackward:
    def test_linear_case_gradient(self):
        # loss = sum(w * x) -> dloss/dw = x
        x = torch.tensor([1.0, -2.0, 3.0])
        w = torch.zeros(3, requires_grad=True)
        (w * x).sum().backward()
        assert torch.equal(w.grad, x)

    def test_gradient_block_zeroes_upstream(self):
        w = torch.randn(3, requires_grad=True)
        v = torch.randn(3, requires_grad=True)
        loss = (L.block_gradient(w) * v).sum()
        loss.backward()
        assert w.grad is None
        assert v.grad is not None

    def test_backward_without_forward_errors(self):
        with pytest.raises(RuntimeError):
            torch.tensor(1.0).backward()

    def test_nan_gradient_error_names_parameter(self):
        p = torch.nn.Parameter(torch.ones(2))
        p.grad = torch.tensor([float("nan"), 0.0])
        with pytest.raises(L.GradientError) as err:
            L.assert_finite_gradients([("enc.w", p)])
        assert "enc.w" in str(err.value)

    def test_conv_finite_difference(self):
        # 64-bit central differences, step 1e-3
        torch.manual_seed(3)
        conv = L.make_layer(L.parse_layer("4k3p1"), 2).double()
        x = torch.randn(2, 2, 6, 6, dtype=torch.float64)
        r = torch.randn(2, 4, 6, 6, dtype=torch.float64)

        def loss_fn():
            return (conv(x) * r).sum()

        err = L.max_fd_relative_error(loss_fn, list(conv.parameters()), step=1e-3, max_elements=20)
        assert err < 1e-4


class TestAdam:
    def test_zero_gradient_leaves_parameter(self):
        p = torch.nn.Parameter(torch.tensor([1.5]))
        opt = L.make_adam([p], lr=0.001)
        p.grad = torch.zeros(1)
        opt.step()
        assert float(p.detach()) == 1.5

    def test_first_step_is_bias_corrected(self):
        p = torch.nn.Parameter(torch.tensor([0.0]))
        opt = L.make_adam([p], lr=0.001)
        p.grad = torch.ones(1)
        opt.step()
        # m_hat = 1, v_hat = 1 -> update = lr * 1/(1 + eps)
        assert math.isclose(float(p.detach()), -0.001, rel_tol=1e-4)

    def test_disjoint_optimizers_are_independent(self):
        a = torch.nn.Parameter(torch.zeros(2))
        b = torch.nn.Parameter(torch.zeros(2))
        opt_a = L.make_adam([a], lr=0.01)
        opt_b = L.make_adam([b], lr=0.01)
        a.grad = torch.ones(2)
        opt_a.step()
        assert torch.all(a != 0)
        assert torch.all(b == 0)
        assert not opt_b.state

    def test_empty_parameter_set_is_noop(self):
        opt = L.make_adam([])
        opt.zero_grad()
        opt.step()
