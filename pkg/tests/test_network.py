"""Network assembly: configuration, deterministic initialization, forward
contract, and the checkpoint container."""

import numpy as np
import pytest

from auseg.network import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    Model,
    ModelConfig,
    build,
    count_params,
    forward,
    load_model,
    load_params_into,
    save_model,
)
from auseg.substrate import Tensor4


def tiny_config(**kw):
    base = dict(encoder_unit="basic", decoder_unit="basic", upsampler="bu",
                base_width=2, reduction_ratio=2, seed=0)
    base.update(kw)
    return ModelConfig(**base)


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.base_width == 8
        assert cfg.reduction_ratio == 16
        assert cfg.name == "Res-Basic-UNet+AU"

    def test_widths_double_per_level(self):
        cfg = ModelConfig(base_width=8)
        assert tuple(cfg.widths()) == (8, 16, 32, 64, 128)

    def test_name_reflects_units_and_upsampler(self):
        assert tiny_config().name == "Basic-Basic-UNet"
        assert tiny_config(upsampler="au").name == "Basic-Basic-UNet+AU"
        assert tiny_config(encoder_unit="deep", decoder_unit="res",
                           upsampler="au").name == "Deep-Res-UNet+AU"

    def test_au_requires_ratio_dividing_first_fusion_width(self):
        # the first fusion concat carries 2 * base_width channels
        with pytest.raises(ValueError):
            ModelConfig(upsampler="au", base_width=8, reduction_ratio=32)
        ModelConfig(upsampler="bu", base_width=8, reduction_ratio=32)  # BU: no gate

    def test_round_trip_dict(self):
        cfg = ModelConfig(encoder_unit="deep", base_width=4,
                          reduction_ratio=4, seed=9)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_invalid_width(self):
        with pytest.raises(ValueError):
            ModelConfig(base_width=0)


class TestBuild:
    def test_same_seed_same_weights(self):
        a = build(tiny_config(seed=5))
        b = build(tiny_config(seed=5))
        for ka, kb in zip(sorted(a.params), sorted(b.params)):
            assert ka == kb
            np.testing.assert_array_equal(a.params[ka].data, b.params[kb].data)

    def test_different_seed_different_weights(self):
        a = build(tiny_config(seed=5))
        b = build(tiny_config(seed=6))
        diffs = [not np.array_equal(a.params[k].data, b.params[k].data)
                 for k in a.params if k.endswith(".weight")]
        assert any(diffs)

    def test_param_count_consistency(self):
        model = build(tiny_config())
        assert count_params(model) == sum(p.data.size for p in model.params.values())

    def test_au_has_more_params_than_bu(self):
        bu = build(tiny_config())
        au = build(tiny_config(upsampler="au"))
        assert count_params(au) > count_params(bu)

    def test_dtype_control(self):
        single = build(tiny_config(), dtype="single")
        double = build(tiny_config(), dtype="double")
        assert next(iter(single.params.values())).dtype == np.float32
        assert next(iter(double.params.values())).dtype == np.float64


class TestForward:
    def test_output_contract(self):
        model = build(tiny_config())
        x = Tensor4(np.random.default_rng(0).uniform(size=(2, 3, 32, 32))
                    .astype(np.float32))
        y = forward(model, x, mode="eval")
        assert y.shape == (2, 1, 32, 32)
        assert np.all(y.data > 0.0) and np.all(y.data < 1.0)

    def test_wrong_channel_count_rejected(self):
        model = build(tiny_config())
        with pytest.raises(ValueError):
            forward(model, Tensor4(np.zeros((1, 1, 32, 32), dtype=np.float32)))

    def test_spatial_size_must_divide_by_16(self):
        model = build(tiny_config())
        with pytest.raises(ValueError):
            forward(model, Tensor4(np.zeros((1, 3, 24, 24), dtype=np.float32)))

    def test_train_mode_updates_bn_running_stats(self):
        model = build(tiny_config(upsampler="au"))
        before = {k: (s.running_mean.copy(), s.running_var.copy())
                  for k, s in model.bn_states.items()}
        x = Tensor4(np.random.default_rng(1).uniform(size=(2, 3, 32, 32))
                    .astype(np.float32))
        forward(model, x, mode="train")
        changed = [k for k, s in model.bn_states.items()
                   if not np.array_equal(before[k][0], s.running_mean)]
        assert changed
        # eval must not touch them further
        after = {k: s.running_mean.copy() for k, s in model.bn_states.items()}
        forward(model, x, mode="eval")
        for k, s in model.bn_states.items():
            np.testing.assert_array_equal(after[k], s.running_mean)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = build(tiny_config(upsampler="au", seed=7))
        # train-mode forward perturbs BN stats so they are not all defaults
        x = Tensor4(np.random.default_rng(2).uniform(size=(2, 3, 32, 32))
                    .astype(np.float32))
        forward(model, x, mode="train")
        path = tmp_path / "m.ckpt"
        save_model(model, path)
        back = load_model(path)
        assert back.config == model.config
        for k in model.params:
            np.testing.assert_array_equal(back.params[k].data, model.params[k].data)
        for k in model.bn_states:
            np.testing.assert_array_equal(back.bn_states[k].running_mean,
                                          model.bn_states[k].running_mean)
            np.testing.assert_array_equal(back.bn_states[k].running_var,
                                          model.bn_states[k].running_var)

    def test_save_is_deterministic(self, tmp_path):
        model = build(tiny_config(seed=3))
        save_model(model, tmp_path / "a.ckpt")
        save_model(model, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_model(path)

    def test_truncation_detected(self, tmp_path):
        model = build(tiny_config())
        path = tmp_path / "m.ckpt"
        save_model(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 128])
        with pytest.raises(CheckpointError):
            load_model(path)

    def test_config_mismatch_rejected(self, tmp_path):
        model = build(tiny_config(base_width=2))
        path = tmp_path / "m.ckpt"
        save_model(model, path)
        with pytest.raises(CheckpointError):
            load_model(path, expected_config=tiny_config(base_width=4))

    def test_seed_difference_tolerated(self, tmp_path):
        # the initialization seed is irrelevant to a trained model
        model = build(tiny_config(seed=1))
        path = tmp_path / "m.ckpt"
        save_model(model, path)
        back = load_model(path, expected_config=tiny_config(seed=99))
        assert isinstance(back, Model)

    def test_load_params_into_existing_model(self, tmp_path):
        src = build(tiny_config(seed=1))
        dst = build(tiny_config(seed=2))
        path = tmp_path / "m.ckpt"
        save_model(src, path)
        load_params_into(dst, path)
        for k in src.params:
            np.testing.assert_array_equal(dst.params[k].data, src.params[k].data)

    def test_magic_prefix_on_disk(self, tmp_path):
        model = build(tiny_config())
        path = tmp_path / "m.ckpt"
        save_model(model, path)
        assert path.read_bytes()[:8] == CHECKPOINT_MAGIC


class TestArchitectureSanity:
    def test_published_scale_parameter_counts(self):
        # at base width 64 the two reference assemblies land on the
        # documented model sizes (34.5M / 75.5M within half a percent)
        plain = ModelConfig(encoder_unit="basic", decoder_unit="basic",
                            upsampler="bu", base_width=64)
        assert abs(count_params_config(plain) - 34.5e6) / 34.5e6 < 0.005
        gated = ModelConfig(encoder_unit="res", decoder_unit="basic",
                            upsampler="au", base_width=64, reduction_ratio=16)
        assert abs(count_params_config(gated) - 75.5e6) / 75.5e6 < 0.005


def count_params_config(cfg):
    total = 0
    model = build(cfg)
    for p in model.params.values():
        total += p.data.size
    return total
