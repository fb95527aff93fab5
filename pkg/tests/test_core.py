import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from matfuse.core import (
    CONFIG_DEFAULTS,
    BinaryMask,
    ConfigError,
    ImageRGB,
    InversionTrajectory,
    LatentState,
    PromptSet,
    TransferConfig,
    ValidationError,
    config_from_json,
    downsample_mask,
    make_config,
    mask_pyramid,
    upsample_mask,
)


class TestImageRGB:
    def test_accepts_unit_range(self):
        img = ImageRGB(np.full((8, 16, 3), 0.5))
        assert img.height == 8 and img.width == 16

    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError, match="pixels"):
            ImageRGB(np.full((8, 8, 3), 1.5))

    def test_rejects_non_divisible_dims(self):
        with pytest.raises(ValidationError, match="pixels"):
            ImageRGB(np.full((9, 8, 3), 0.5))

    def test_rejects_nan(self):
        bad = np.full((8, 8, 3), 0.5)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValidationError, match="pixels"):
            ImageRGB(bad)

    def test_file_round_trip(self, tmp_path):
        img = ImageRGB(np.round(np.random.default_rng(0).uniform(0, 1, (16, 16, 3)) * 255) / 255)
        path = tmp_path / "img.png"
        img.save(str(path))
        loaded = ImageRGB.from_file(str(path))
        assert np.array_equal(loaded.pixels, img.pixels)

    def test_pixels_frozen(self):
        img = ImageRGB.zeros(8, 8)
        with pytest.raises(ValueError):
            img.pixels[0, 0, 0] = 1.0


class TestBinaryMask:
    def test_accepts_binary(self):
        mask = BinaryMask(np.eye(8, dtype=np.uint8))
        assert mask.nonempty

    def test_rejects_other_values(self):
        with pytest.raises(ValidationError, match="values"):
            BinaryMask(np.full((8, 8), 2, dtype=np.uint8))

    def test_from_file_thresholds_with_warning(self, tmp_path):
        from PIL import Image

        arr = np.zeros((8, 8), dtype=np.uint8)
        arr[:4] = 200
        arr[4] = 140
        Image.fromarray(arr, mode="L").save(tmp_path / "m.png")
        with pytest.warns(UserWarning, match="threshold"):
            mask = BinaryMask.from_file(str(tmp_path / "m.png"))
        assert set(np.unique(mask.values)) == {0, 1}
        assert mask.values[4].all()
        assert not mask.values[5].any()

    def test_save_load_round_trip(self, tmp_path):
        mask = BinaryMask(np.random.default_rng(1).integers(0, 2, (16, 16)).astype(np.uint8))
        mask.save(str(tmp_path / "m.png"))
        loaded = BinaryMask.from_file(str(tmp_path / "m.png"))
        assert np.array_equal(loaded.values, mask.values)


class TestMaskResampling:
    def test_downsample_matches_explicit_loop(self):
        rng = np.random.default_rng(3)
        mask = BinaryMask(rng.integers(0, 2, (16, 24)).astype(np.uint8))
        down = downsample_mask(mask, (4, 6))
        fh, fw = 4, 4
        for i in range(4):
            for j in range(6):
                assert down.values[i, j] == mask.values[i * fh : (i + 1) * fh, j * fw : (j + 1) * fw].max()

    @given(st.integers(0, 15), st.integers(0, 15))
    def test_any_covered_pixel_survives(self, r, c):
        values = np.zeros((16, 16), dtype=np.uint8)
        values[r, c] = 1
        down = downsample_mask(BinaryMask(values), (4, 4))
        assert down.values[r // 4, c // 4] == 1
        assert down.values.sum() == 1

    def test_indivisible_target_rejected(self):
        with pytest.raises(ValidationError, match="target"):
            downsample_mask(BinaryMask(np.zeros((16, 16), np.uint8)), (5, 4))

    def test_pyramid_levels_and_tags(self):
        mask = BinaryMask(np.ones((32, 32), np.uint8))
        levels = mask_pyramid(mask, [(8, 8), (4, 4)])
        assert [(m.height, m.width) for m in levels] == [(8, 8), (4, 4)]
        assert levels[0].space == "attention-8x8"

    def test_upsample_nearest(self):
        mask = BinaryMask(np.eye(4, dtype=np.uint8), space="latent")
        up = upsample_mask(mask, (8, 8))
        assert up.values[0:2, 0:2].all() and not up.values[0:2, 2:4].any()


class TestConfig:
    def test_defaults_snapshot(self):
        cfg = TransferConfig()
        assert cfg.to_dict() == CONFIG_DEFAULTS

    @pytest.mark.parametrize(
        "field,value",
        [
            ("T", 0),
            ("lam", -0.1),
            ("v_self", -1.0),
            ("v_feat", -2.0),
            ("tau_g", 51),
            ("tau_m", -1),
            ("r_lower", 0.0),
        ],
    )
    def test_invalid_values_name_the_field(self, field, value):
        with pytest.raises(ConfigError, match=field):
            TransferConfig(**{field: value})

    def test_r_bounds_ordering(self):
        with pytest.raises(ConfigError, match="r_lower"):
            TransferConfig(r_lower=4.0, r_upper=3.0)

    def test_windows_bounded_by_steps(self):
        cfg = TransferConfig(T=10, tau_g=10, tau_m=10)
        assert cfg.tau_g == 10
        with pytest.raises(ConfigError, match="tau_g"):
            TransferConfig(T=10, tau_g=11)

    def test_make_config_unknown_key(self):
        with pytest.raises(ConfigError, match="decay"):
            make_config({"decay": 1.0})

    def test_make_config_coerces_numeric_types(self):
        cfg = make_config({"T": 10.0, "w": 5, "tau_g": 5, "tau_m": 8})
        assert cfg.T == 10 and isinstance(cfg.T, int)
        assert cfg.w == 5.0 and isinstance(cfg.w, float)

    def test_make_config_rejects_fractional_int_field(self):
        with pytest.raises(ConfigError, match="T"):
            make_config({"T": 10.5, "tau_g": 5, "tau_m": 8})

    def test_json_round_trip(self):
        cfg = make_config({"lam": 1.1, "T": 25, "tau_g": 20, "tau_m": 25})
        back = config_from_json(json.dumps(cfg.to_dict()))
        assert back == cfg

    def test_replace_keeps_validation(self):
        cfg = TransferConfig(T=10, tau_g=10, tau_m=10)
        with pytest.raises(ConfigError, match="tau_g"):
            cfg.replace(T=5)


class TestLatentTypes:
    def test_latent_state_validation(self):
        with pytest.raises(ValidationError, match="t"):
            LatentState(torch.zeros(4, 8, 8, dtype=torch.float64), t=-1)
        with pytest.raises(ValidationError, match="data"):
            LatentState(torch.full((4, 8, 8), float("nan"), dtype=torch.float64), t=0)

    def test_trajectory_slots_must_be_contiguous(self):
        states = [LatentState(torch.zeros(4, 8, 8, dtype=torch.float64), t=t) for t in (0, 2)]
        with pytest.raises(ValidationError, match="latents"):
            InversionTrajectory(latents=tuple(states), y_src="p")

    def test_trajectory_indexing(self):
        states = tuple(LatentState(torch.full((4, 8, 8), float(t), dtype=torch.float64), t=t) for t in range(4))
        traj = InversionTrajectory(latents=states, y_src="p")
        assert traj.T == 3
        assert float(traj[2].data[0, 0, 0]) == 2.0

    def test_prompts_require_source(self):
        with pytest.raises(ValidationError, match="y_src"):
            PromptSet(y_src="", y_trg="x")
