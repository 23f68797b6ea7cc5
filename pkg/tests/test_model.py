"""Model assembly: geometry, determinism, parameter counts, checkpoints."""

import numpy as np
import numpy.testing as npt
import pytest

import sa2net.tensor as T
from sa2net.errors import ConfigError, IncompatibleCheckpointError, \
    IntegrityError
from sa2net.gradcheck import check_encoder_stage, check_full_model
from sa2net.model import (
    ModelConfig,
    encoder_forward,
    init_model_params,
    load_checkpoint,
    model_forward,
    model_param_count,
    save_checkpoint,
)
from sa2net.optim import AdamState
from sa2net.tensor import Rng, Tensor


def small_cfg(**kw):
    defaults = dict(in_channels=1, channels=8, input_size=(32, 32), seed=5)
    defaults.update(kw)
    return ModelConfig(**defaults)


class TestModelConfig:
    def test_input_size_divisibility(self):
        with pytest.raises(ConfigError, match="divisible"):
            ModelConfig(input_size=(60, 64))
        with pytest.raises(ConfigError, match="at least"):
            ModelConfig(input_size=(16, 16))

    def test_lsa_defaults_to_model_channels(self):
        cfg = ModelConfig(channels=32)
        assert cfg.lsa.channels == 32

    def test_canonical_round_trip(self):
        cfg = small_cfg(seed=123, sa2_enabled=False)
        back = ModelConfig.from_canonical(cfg.canonical())
        assert back == cfg
        assert back.fingerprint() == cfg.fingerprint()

    def test_fingerprint_sensitive_to_fields(self):
        assert small_cfg(channels=8).fingerprint() != \
            small_cfg(channels=16).fingerprint()


class TestEncoder:
    def test_stage_geometry(self):
        cfg = ModelConfig(in_channels=3, channels=64, input_size=(64, 64), seed=0)
        store = init_model_params(cfg)
        image = Tensor(Rng(1).normal((1, 3, 64, 64)))
        stages = encoder_forward(image, store, cfg)
        assert [s.shape for s in stages] == [
            (1, 64, 32, 32), (1, 64, 16, 16), (1, 64, 8, 8), (1, 64, 4, 4)]

    def test_zero_image_zero_biases_give_zero_stages(self):
        cfg = small_cfg()
        store = init_model_params(cfg, dtype=T.F64)
        image = Tensor(np.zeros((1, 1, 32, 32)))
        for s in encoder_forward(image, store, cfg):
            npt.assert_array_equal(s.data, np.zeros_like(s.data))

    def test_patch_gradcheck(self):
        assert max(check_encoder_stage(seed) for seed in range(5)) < 1e-3


class TestModelForward:
    def test_output_shapes(self):
        cfg = small_cfg()
        store = init_model_params(cfg)
        image = Tensor(Rng(2).normal((2, 1, 32, 32)))
        out = model_forward(image, store, cfg)
        assert len(out.logits) == 4
        for s in out.logits:
            assert s.shape == (2, 1, 32, 32)

    def test_bit_identical_across_runs(self):
        cfg = small_cfg(seed=9)
        image_bits = Rng(10).normal((1, 1, 32, 32))

        def run():
            store = init_model_params(cfg)
            out = model_forward(Tensor(image_bits.copy()), store, cfg)
            return b"".join(s.data.tobytes() for s in out.logits)

        assert run() == run()

    def test_pure_in_params_and_image(self):
        cfg = small_cfg()
        store = init_model_params(cfg)
        image = Tensor(Rng(3).normal((1, 1, 32, 32)))
        first = model_forward(image, store, cfg)
        second = model_forward(image, store, cfg)
        for a, b in zip(first.logits, second.logits):
            assert a.data.tobytes() == b.data.tobytes()

    def test_ablated_model_skips_attention_params(self):
        full = init_model_params(small_cfg())
        ablated = init_model_params(small_cfg(sa2_enabled=False))
        assert any(n.startswith("sa2.") for n in full.names())
        assert not any(n.startswith("sa2.") for n in ablated.names())
        out = model_forward(Tensor(Rng(4).normal((1, 1, 32, 32))),
                            ablated, small_cfg(sa2_enabled=False))
        assert len(out.logits) == 4

    def test_parameter_count_matches_closed_form(self):
        for cfg in (small_cfg(), small_cfg(sa2_enabled=False),
                    ModelConfig(in_channels=3, channels=16,
                                input_size=(48, 64), seed=1)):
            store = init_model_params(cfg)
            assert store.total_parameters() == model_param_count(cfg)

    def test_full_model_gradcheck(self):
        assert max(check_full_model(seed) for seed in range(5)) < 2e-3


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = small_cfg()
        store = init_model_params(cfg)
        path = tmp_path / "model.sa2c"
        save_checkpoint(path, store, cfg)
        loaded, loaded_cfg, adam = load_checkpoint(path)
        assert adam is None
        assert loaded_cfg == cfg
        assert list(loaded.names()) == list(store.names())
        for name, t in store.items():
            assert loaded[name].data.tobytes() == t.data.tobytes()

    def test_save_load_save_byte_identical(self, tmp_path):
        cfg = small_cfg()
        store = init_model_params(cfg)
        state = AdamState.for_store(store)
        state.step = 3
        for name in state.m:
            state.m[name] += 0.25
        first = tmp_path / "a.sa2c"
        second = tmp_path / "b.sa2c"
        save_checkpoint(first, store, cfg, state)
        loaded, loaded_cfg, loaded_state = load_checkpoint(first)
        save_checkpoint(second, loaded, loaded_cfg, loaded_state)
        assert first.read_bytes() == second.read_bytes()

    def test_adam_state_round_trip(self, tmp_path):
        cfg = small_cfg()
        store = init_model_params(cfg)
        state = AdamState.for_store(store)
        state.step = 41
        path = tmp_path / "model.sa2c"
        save_checkpoint(path, store, cfg, state)
        _, _, back = load_checkpoint(path)
        assert back.step == 41
        assert set(back.m) == set(state.m)
        for name in state.m:
            npt.assert_array_equal(back.m[name], state.m[name])
            npt.assert_array_equal(back.v[name], state.v[name])

    def test_fingerprint_mismatch_rejected(self, tmp_path):
        cfg64 = small_cfg(channels=64)
        path = tmp_path / "model.sa2c"
        save_checkpoint(path, init_model_params(cfg64), cfg64)
        with pytest.raises(IncompatibleCheckpointError) as err:
            load_checkpoint(path, expected_config=small_cfg(channels=32))
        message = str(err.value)
        assert cfg64.fingerprint() in message
        assert small_cfg(channels=32).fingerprint() in message

    def test_truncated_file_fails_atomically(self, tmp_path):
        cfg = small_cfg()
        path = tmp_path / "model.sa2c"
        save_checkpoint(path, init_model_params(cfg), cfg)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(IntegrityError, match="byte"):
            load_checkpoint(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        cfg = small_cfg()
        path = tmp_path / "model.sa2c"
        save_checkpoint(path, init_model_params(cfg), cfg)
        with open(path, "ab") as fp:
            fp.write(b"junk")
        with pytest.raises(IntegrityError, match="trailing"):
            load_checkpoint(path)
