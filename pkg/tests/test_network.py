"""
Tests for the restoration network: RLFB, the UNet assembly, the L1
objective, parameter counting and the checkpoint container.
"""

import numpy as np
import pytest

from checkpoint import Checkpoint
from event_pipeline import VoxelGrid
from layers import Conv2d
from network import (EmambaIR, ModelConfig, ResidualLocalFeatureBlock, compute_loss, param_count, rlfb_forward,
                     unet_forward)
from optimizer import OptimizerState
from tensor_engine import Tensor, conv2d, mul, sum_
from validation_utils import ValidationError


def tiny_config(**overrides):
    values = dict(levels=2, widths=[4, 8], ks=[2, 2], heads=[2, 2], state_size=2, voxel_bins=2,
                  rlfb_depth=1, kernel_sizes=[3])
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def inputs(rng):
    return Tensor(rng.uniform(size=(1, 8, 8))), Tensor(rng.normal(size=(2, 8, 8)))


# =============================================================================
# Model configuration
# =============================================================================

class TestModelConfig:
    def test_defaults(self):
        config = ModelConfig()
        assert config.widths == [16, 32, 64]
        assert config.ks == [4, 4, 4]
        assert config.voxel_bins == 6
        assert config.divisor == 4

    def test_level_count_mismatch(self):
        with pytest.raises(ValidationError) as exc:
            ModelConfig(levels=2, widths=[16, 32, 64])
        assert exc.value.error_code == "LEVEL_COUNT_MISMATCH"

    def test_width_ratio(self):
        with pytest.raises(ValidationError) as exc:
            ModelConfig(widths=[16, 24, 48])
        assert exc.value.error_code == "WIDTH_RATIO_VIOLATION"

    def test_invalid_k_and_heads(self):
        with pytest.raises(ValidationError) as exc:
            ModelConfig(ks=[4, 0, 4])
        assert exc.value.error_code == "INVALID_K"
        with pytest.raises(ValidationError) as exc:
            ModelConfig(heads=[3, 3, 3])
        assert exc.value.error_code == "HEADS_NOT_DIVISIBLE"

    def test_dict_round_trip_and_unknown_key(self):
        config = tiny_config()
        assert ModelConfig.from_dict(config.to_dict()) == config
        with pytest.raises(ValidationError) as exc:
            ModelConfig.from_dict({**config.to_dict(), "depth": 3})
        assert exc.value.error_code == "UNKNOWN_CONFIG_KEY"

    def test_with_k(self):
        assert tiny_config().with_k(7).ks == [7, 7]
        assert tiny_config().with_k(None).ks == [None, None]


# =============================================================================
# RLFB
# =============================================================================

class TestResidualLocalFeatureBlock:
    def test_zero_weights_identity(self, rng):
        block = ResidualLocalFeatureBlock(3, rng)
        block.fill_parameters(0.0)
        x = rng.normal(size=(3, 5, 5))
        np.testing.assert_array_equal(rlfb_forward(Tensor(x), block).data, x)

    def test_shape_preserved(self, rng):
        block = ResidualLocalFeatureBlock(3, rng)
        assert rlfb_forward(Tensor(rng.normal(size=(2, 3, 6, 4))), block).shape == (2, 3, 6, 4)

    def test_matches_three_block_composition(self, rng):
        block = ResidualLocalFeatureBlock(3, rng)
        for conv in block.convs:
            conv.bias = Tensor(rng.normal(size=3), requires_grad=True)
        x = rng.normal(size=(3, 5, 5))
        y = x[None]
        for conv in block.convs:
            y = np.maximum(conv2d(Tensor(y), conv.weight, conv.bias, padding=1).data, 0.0)
        np.testing.assert_allclose(rlfb_forward(Tensor(x), block).data, x + y[0], atol=1e-12)

    def test_depth(self, rng):
        assert len(ResidualLocalFeatureBlock(2, rng).convs) == 3
        assert len(ResidualLocalFeatureBlock(2, rng, depth=5).convs) == 5


# =============================================================================
# UNet
# =============================================================================

class TestEmambaIR:
    def test_output_shape(self, inputs):
        image, voxel = inputs
        model = EmambaIR(tiny_config(), seed=0)
        assert unet_forward(image, voxel, model).shape == image.shape
        batched = model(Tensor(np.stack([image.data] * 2)), Tensor(np.stack([voxel.data] * 2)))
        assert batched.shape == (2, 1, 8, 8)

    def test_default_three_levels(self, rng):
        model = EmambaIR(ModelConfig(state_size=2), seed=0)
        image = Tensor(rng.uniform(size=(1, 8, 8)))
        assert model(image, VoxelGrid(6, Tensor(rng.normal(size=(6, 8, 8))))).shape == (1, 8, 8)

    def test_starts_at_identity(self, inputs):
        image, voxel = inputs
        np.testing.assert_array_equal(EmambaIR(tiny_config(), seed=3)(image, voxel).data, image.data)

    def test_zero_weights_global_residual(self, inputs):
        image, voxel = inputs
        model = EmambaIR(tiny_config(), seed=0)
        model.fill_parameters(0.0)
        np.testing.assert_array_equal(model(image, voxel).data, image.data)

    def test_divisibility(self, rng):
        model = EmambaIR(ModelConfig(state_size=2), seed=0)
        with pytest.raises(ValidationError) as exc:
            model(Tensor(rng.uniform(size=(1, 30, 32))), Tensor(rng.normal(size=(6, 30, 32))))
        assert exc.value.error_code == "DIVISIBILITY_VIOLATION"

    def test_resolution_and_channel_mismatch(self, rng):
        model = EmambaIR(tiny_config(), seed=0)
        with pytest.raises(ValidationError) as exc:
            model(Tensor(rng.uniform(size=(1, 8, 8))), Tensor(rng.normal(size=(2, 8, 6))))
        assert exc.value.error_code == "RESOLUTION_MISMATCH"
        with pytest.raises(ValidationError) as exc:
            model(Tensor(rng.uniform(size=(3, 8, 8))), Tensor(rng.normal(size=(2, 8, 8))))
        assert exc.value.error_code == "SHAPE_MISMATCH"

    def test_color_images(self, rng):
        model = EmambaIR(tiny_config(image_channels=3), seed=0)
        out = model(Tensor(rng.uniform(size=(3, 8, 8))), Tensor(rng.normal(size=(2, 8, 8))))
        assert out.shape == (3, 8, 8)

    def test_bitwise_deterministic(self, inputs, rng):
        image, voxel = inputs
        first, second = EmambaIR(tiny_config(), seed=5), EmambaIR(tiny_config(), seed=5)
        for model in (first, second):
            model.output.weight = Tensor(np.random.default_rng(0).normal(size=model.output.weight.shape),
                                         requires_grad=True)
        assert first(image, voxel).data.tobytes() == second(image, voxel).data.tobytes()

    def test_rlfb_only_baseline_ignores_events(self, inputs, rng):
        image, voxel = inputs
        model = EmambaIR(tiny_config(use_tsam=False, use_gssm=False), seed=2)
        names = list(model.named_parameters())
        assert not any("tsam" in n or "gssm" in n or n.startswith("event_") for n in names)
        np.testing.assert_array_equal(model(image, voxel).data, image.data)
        model.output.weight = Tensor(rng.normal(size=model.output.weight.shape), requires_grad=True)
        other_voxel = Tensor(rng.normal(size=voxel.shape))
        assert model(image, voxel).data.tobytes() == model(image, other_voxel).data.tobytes()
        assert not np.array_equal(model(image, voxel).data, image.data)

    def test_module_switches_change_parameter_count(self):
        counts = {(tsam, gssm): EmambaIR(tiny_config(use_tsam=tsam, use_gssm=gssm), seed=0).parameter_count()
                  for tsam in (False, True) for gssm in (False, True)}
        assert counts[False, False] < counts[False, True] < counts[True, True]
        assert counts[False, False] < counts[True, False] < counts[True, True]
        # the event branch and TSAM add the same parameters with or without GSSM
        assert counts[True, True] - counts[False, True] == counts[True, False] - counts[False, False]

    def test_gssm_only_uses_no_events(self, inputs, rng):
        image, voxel = inputs
        model = EmambaIR(tiny_config(use_tsam=False), seed=4)
        assert any("gssm" in n for n in model.named_parameters())
        model.output.weight = Tensor(rng.normal(size=model.output.weight.shape), requires_grad=True)
        assert model(image, voxel).data.tobytes() == model(image, Tensor(np.zeros(voxel.shape))).data.tobytes()

    def test_end_to_end_gradients(self, rng, gradcheck, bind):
        config = ModelConfig(levels=1, widths=[4], ks=[4], heads=[2], state_size=2, voxel_bins=2,
                             rlfb_depth=1, kernel_sizes=[3])
        model = EmambaIR(config, seed=1)
        target = Tensor(rng.uniform(size=(1, 1, 8, 8)))

        def objective(image, voxel, output_weight, stem_weight):
            bind(model, "output.weight", output_weight)
            bind(model, "image_stem.weight", stem_weight)
            restored = unet_forward(image, voxel, model)
            return sum_(mul(restored - target, restored - target))

        gradcheck(objective, [rng.uniform(size=(1, 1, 8, 8)), rng.normal(size=(1, 2, 8, 8)),
                              rng.normal(scale=0.1, size=model.output.weight.shape),
                              model.image_stem.weight.data], tol=1e-3, max_entries=20)


# =============================================================================
# Loss and parameter counting
# =============================================================================

class TestLossAndCounts:
    def test_identical_is_zero(self, rng):
        x = rng.normal(size=(1, 4, 4))
        assert compute_loss(Tensor(x), Tensor(x)).item() == 0.0

    def test_constant_offset(self, rng):
        x = rng.normal(size=(1, 4, 4))
        assert compute_loss(Tensor(x + 0.1), Tensor(x)).item() == pytest.approx(0.1, abs=1e-12)

    def test_matches_elementwise_oracle(self, rng):
        a, b = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3, 5))
        assert compute_loss(Tensor(a), Tensor(b)).item() == pytest.approx(np.abs(a - b).mean(), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError) as exc:
            compute_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))
        assert exc.value.error_code == "SHAPE_MISMATCH"

    def test_single_conv(self, rng):
        assert param_count(Conv2d(2, 4, 3, rng).named_parameters()) == 76

    def test_summation_oracle(self):
        params = EmambaIR(tiny_config(), seed=0).named_parameters()
        assert param_count(params) == sum(int(np.prod(p.shape)) for p in params.values())

    def test_invariant_under_k(self):
        counts = {param_count(EmambaIR(ModelConfig(state_size=2).with_k(k), seed=0).named_parameters())
                  for k in (1, 2, 4, 8, 16, None)}
        assert len(counts) == 1

    def test_grows_with_width(self):
        small = EmambaIR(tiny_config(), seed=0).parameter_count()
        large = EmambaIR(tiny_config(widths=[8, 16]), seed=0).parameter_count()
        assert large > 2 * small


# =============================================================================
# Checkpoints
# =============================================================================

@pytest.fixture
def checkpoint(rng):
    model = EmambaIR(tiny_config(), seed=4)
    params = {name: t.detach() for name, t in model.named_parameters().items()}
    moments = {name: rng.normal(size=t.shape) for name, t in params.items()}
    optimizer = OptimizerState(lr_initial=1e-3, total_steps=50, step=7, first_moment=moments,
                               second_moment={k: np.abs(v) for k, v in moments.items()})
    return Checkpoint(params=params, model_config=tiny_config(), optimizer=optimizer, step=7, seed=4,
                      run_config={"mode": "train"})


class TestCheckpoint:
    def test_load_then_save_is_byte_identical(self, checkpoint, tmp_path):
        path = checkpoint.save(tmp_path / "a.ckpt")
        reloaded = Checkpoint.load(path)
        assert reloaded.to_bytes() == path.read_bytes()

    def test_round_trip_contents(self, checkpoint, tmp_path):
        reloaded = Checkpoint.load(checkpoint.save(tmp_path / "a.ckpt"))
        assert reloaded.step == 7 and reloaded.seed == 4
        assert reloaded.model_config == checkpoint.model_config
        assert reloaded.optimizer.hyperparameters() == checkpoint.optimizer.hyperparameters()
        assert reloaded.run_config == {"mode": "train"}
        for name, value in checkpoint.params.items():
            assert reloaded.params[name].data.tobytes() == value.data.tobytes()
            np.testing.assert_array_equal(reloaded.optimizer.first_moment[name],
                                          checkpoint.optimizer.first_moment[name])

    def test_every_parameter_once(self, checkpoint):
        names = checkpoint.metadata()["parameters"]
        assert len(names) == len(set(names)) == len(EmambaIR(tiny_config()).named_parameters())

    def test_build_model_reproduces_outputs(self, checkpoint, inputs, tmp_path):
        image, voxel = inputs
        model = Checkpoint.load(checkpoint.save(tmp_path / "a.ckpt")).build_model()
        original = EmambaIR(tiny_config(), seed=0)
        original.load_parameters(checkpoint.params)
        assert model(image, voxel).data.tobytes() == original(image, voxel).data.tobytes()

    def test_incompatible_parameters(self, checkpoint):
        checkpoint.params.pop(sorted(checkpoint.params)[0])
        with pytest.raises(ValidationError) as exc:
            checkpoint.build_model()
        assert exc.value.error_code == "INCOMPATIBLE_CHECKPOINT"

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a zip archive")
        with pytest.raises(ValidationError) as exc:
            Checkpoint.load(path)
        assert exc.value.error_code == "MALFORMED_CHECKPOINT"
