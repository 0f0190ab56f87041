import numpy as np
import pytest

from vesselseg.errors import ConfigError, DataError, ShapeError
from vesselseg.nn import (
    EncoderConfig,
    ModelConfig,
    build_model,
    load_weights,
    model_config_from_text,
    model_config_to_text,
    read_records,
    save_weights,
    write_records,
)
from vesselseg.tensor import Tape, Tensor, backward, grad_check


def small_config(decoder="unet", block="residual", norm="none", hw=32, widths=(4, 8, 16),
                 blocks=1, seed=0):
    return ModelConfig(
        encoder=EncoderConfig(block, widths, blocks),
        decoder_kind=decoder,
        fpn_width=8,
        norm=norm,
        input_size=(3, hw, hw),
        seed=seed,
    )


def conv_params(o, i, k):
    return o * i * k * k + o


class TestConfigValidation:
    def test_too_few_stages(self):
        with pytest.raises(ConfigError):
            EncoderConfig("plain", (8,), 1)

    def test_bad_block_kind(self):
        with pytest.raises(ConfigError):
            EncoderConfig("dense", (8, 16), 1)

    def test_divisibility(self):
        with pytest.raises(ConfigError, match="divisible"):
            ModelConfig(EncoderConfig("plain", (4, 8, 16), 1), input_size=(3, 30, 32))

    def test_fpn_width_positive(self):
        with pytest.raises(ConfigError):
            ModelConfig(EncoderConfig("plain", (4, 8), 1), decoder_kind="fpn",
                        fpn_width=0, input_size=(3, 32, 32))

    def test_config_text_round_trip(self):
        cfg = small_config("fpn", "plain", "batchnorm", hw=64, widths=(8, 16), seed=9)
        assert model_config_from_text(model_config_to_text(cfg)) == cfg


class TestBuildAndForward:
    @pytest.mark.parametrize("decoder", ["unet", "fpn"])
    def test_output_shape_matches_input(self, decoder):
        cfg = small_config(decoder, widths=(16, 32, 64), hw=64)
        model = build_model(cfg, dtype=np.float64)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 64, 64)))
        out = model.forward(x)
        assert out.shape == (2, 1, 64, 64)

    def test_same_seed_identical_params(self):
        a = build_model(small_config(seed=5))
        b = build_model(small_config(seed=5))
        assert a.params.keys() == b.params.keys()
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_different_seed_differs(self):
        a = build_model(small_config(seed=5))
        b = build_model(small_config(seed=6))
        assert any(
            not np.array_equal(a.params[n].data, b.params[n].data) for n in a.params
        )

    def test_batch_independence_without_norm(self):
        cfg = small_config("unet", norm="none")
        model = build_model(cfg, dtype=np.float64)
        rng = np.random.default_rng(1)
        batch = rng.normal(size=(3, 3, 32, 32))
        out = model.forward(Tensor(batch)).data
        perm = [2, 0, 1]
        out_perm = model.forward(Tensor(batch[perm])).data
        np.testing.assert_allclose(out_perm, out[perm], rtol=1e-10)

    def test_zero_final_head_gives_zero_logits(self):
        model = build_model(small_config(), dtype=np.float64)
        model.params["head.weight"].data[...] = 0.0
        model.params["head.bias"].data[...] = 0.0
        x = Tensor(np.random.default_rng(2).normal(size=(1, 3, 32, 32)))
        np.testing.assert_array_equal(model.forward(x).data, 0.0)

    def test_wrong_spatial_size_rejected(self):
        model = build_model(small_config(hw=32))
        with pytest.raises(ShapeError):
            model.forward(Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))

    @pytest.mark.parametrize("decoder", ["unet", "fpn"])
    @pytest.mark.parametrize("block", ["plain", "residual"])
    def test_batchnorm_variant_runs(self, decoder, block):
        cfg = small_config(decoder, block, norm="batchnorm")
        model = build_model(cfg, dtype=np.float64)
        model.set_training(True)
        x = Tensor(np.random.default_rng(3).normal(size=(2, 3, 32, 32)))
        out = model.forward(x)
        assert np.isfinite(out.data).all()

    def test_parameter_count_closed_form_unet(self):
        # plain blocks, 2 stages, widths (w0, w1), 1 block per stage
        w0, w1 = 4, 8
        cfg = small_config("unet", "plain", widths=(w0, w1))
        model = build_model(cfg)
        expected = (
            conv_params(w0, 3, 3)            # encoder stage0
            + conv_params(w1, w0, 3)         # encoder stage1
            + conv_params(w0, w1 + w0, 3)    # decoder up0 conv1
            + conv_params(w0, w0, 3)         # decoder up0 conv2
            + conv_params(1, w0, 1)          # head
        )
        assert model.parameter_count() == expected

    def test_doubling_widths_roughly_quadruples_stage_params(self):
        base = build_model(small_config("unet", "plain", widths=(4, 8)))
        double = build_model(small_config("unet", "plain", widths=(8, 16)))

        def stage1_params(model):
            return sum(
                t.size for n, t in model.params.items() if n.startswith("encoder.stage1.")
            )

        small_n = stage1_params(base)     # 8*4*9 + 8
        big_n = stage1_params(double)     # 16*8*9 + 16
        assert big_n == 4 * (small_n - 8) + 16

    def test_encoder_shapes_shared_between_decoders(self):
        unet = build_model(small_config("unet", seed=1))
        fpn = build_model(small_config("fpn", seed=2))
        enc_u = {n: t.shape for n, t in unet.params.items() if n.startswith("encoder.")}
        enc_f = {n: t.shape for n, t in fpn.params.items() if n.startswith("encoder.")}
        assert enc_u == enc_f

    @pytest.mark.parametrize("decoder", ["unet", "fpn"])
    def test_gradient_reaches_every_parameter(self, decoder):
        cfg = small_config(decoder, widths=(4, 8), hw=16)
        model = build_model(cfg, dtype=np.float64)
        model.set_training(True)
        rng = np.random.default_rng(4)
        x = Tensor(rng.uniform(0.1, 1.0, size=(2, 3, 16, 16)))
        r = rng.normal(size=(2, 1, 16, 16))
        with Tape():
            out = model.forward(x)
            loss = (out * Tensor(r)).sum()
        backward(loss)
        for name, p in model.params.items():
            assert p.grad is not None, f"no grad for {name}"
            assert np.abs(p.grad).sum() > 0, f"grad identically zero for {name}"


class TestResidualBlock:
    def test_zero_f_is_relu_of_input(self):
        cfg = small_config("unet", "residual", widths=(4, 8), hw=16)
        model = build_model(cfg, dtype=np.float64)
        # Zero the residual branch of stage1.block0 (channels match after stage0).
        for suffix in ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"):
            model.params[f"encoder.stage1.block0.{suffix}"].data[...] = 0.0
        # stage1 has a projection (4 -> 8 channels), so zero F means relu(proj(x)).
        assert "encoder.stage1.block0.proj.weight" in model.params

    def test_identity_shortcut_preserves_shape(self):
        cfg = ModelConfig(EncoderConfig("residual", (4, 8), 2), "unet",
                          input_size=(3, 16, 16))
        model = build_model(cfg, dtype=np.float64)
        # second block of each stage has matching channels: no projection
        assert "encoder.stage0.block1.proj.weight" not in model.params

    def test_grad_check_through_block(self):
        from vesselseg.nn import _ResidualBlock

        cfg = small_config(widths=(4, 8), hw=16)
        model = build_model(cfg, dtype=np.float64)
        block = model.enc_stages[0][0]
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(0.05, 1.0, size=(1, 3, 8, 8)), requires_grad=True)
        r = Tensor(rng.normal(size=(1, 4, 8, 8)))
        assert isinstance(block, _ResidualBlock)
        assert grad_check(lambda t: (block(t) * r).sum(), x) < 1e-4


class TestWeightsIO:
    def test_round_trip_forward_identical(self, tmp_path):
        cfg = small_config("unet", norm="batchnorm")
        model = build_model(cfg, dtype=np.float64)
        path = tmp_path / "w.bin"
        save_weights(model, path)
        clone = build_model(cfg, dtype=np.float64)
        # perturb, then load back
        for t in clone.params.values():
            t.data += 1.0
        load_weights(clone, path)
        x = Tensor(np.random.default_rng(6).normal(size=(1, 3, 32, 32)))
        np.testing.assert_array_equal(model.forward(x).data, clone.forward(x).data)

    def test_partial_encoder_load(self, tmp_path):
        unet = build_model(small_config("unet", seed=1), dtype=np.float64)
        save_weights(unet, tmp_path / "unet.bin")
        fpn = build_model(small_config("fpn", seed=2), dtype=np.float64)
        decoder_before = {
            n: t.data.copy() for n, t in fpn.params.items() if not n.startswith("encoder.")
        }
        load_weights(fpn, tmp_path / "unet.bin", prefix="encoder.")
        for n, t in fpn.params.items():
            if n.startswith("encoder."):
                np.testing.assert_array_equal(t.data, unet.params[n].data)
            else:
                np.testing.assert_array_equal(t.data, decoder_before[n])

    def test_shape_mismatch_names_parameter(self, tmp_path):
        model = build_model(small_config(widths=(4, 8)))
        save_weights(model, tmp_path / "w.bin")
        other = build_model(small_config(widths=(8, 16)))
        with pytest.raises(DataError, match=r"parameter '.*': file shape"):
            load_weights(other, tmp_path / "w.bin")

    def test_name_mismatch_detected(self, tmp_path):
        unet = build_model(small_config("unet"))
        save_weights(unet, tmp_path / "w.bin")
        fpn = build_model(small_config("fpn"))
        with pytest.raises(DataError, match="name mismatch"):
            load_weights(fpn, tmp_path / "w.bin")

    def test_corruption_detected(self, tmp_path):
        model = build_model(small_config())
        path = tmp_path / "w.bin"
        save_weights(model, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="checksum"):
            load_weights(model, path)

    def test_records_preserve_dtype_and_shape(self, tmp_path):
        records = {
            "a": np.arange(6, dtype=np.float32).reshape(2, 3),
            "b": np.arange(4, dtype=np.float64),
            "c": np.frombuffer(b"hello", dtype=np.uint8).copy(),
        }
        write_records(records, tmp_path / "r.bin")
        back = read_records(tmp_path / "r.bin")
        assert set(back) == {"a", "b", "c"}
        for k in records:
            np.testing.assert_array_equal(back[k], records[k])
            assert back[k].dtype == records[k].dtype
