import numpy as np
import pytest
import torch

from conftest import block_image, square_mask
from matfuse.core import ImageRGB, LatentState, ValidationError, downsample_mask
from matfuse.denoiser import (
    BackendLoadError,
    Conditioning,
    load_pretrained_backend,
    make_toy_backend,
)


def latent(seed=0, t=25, shape=(4, 8, 8)):
    rng = np.random.default_rng(seed)
    return LatentState(torch.from_numpy(rng.standard_normal(shape)), t=t)


class TestConditioningType:
    def test_null_ignores_everything(self):
        cond = Conditioning.null()
        assert cond.mode == "null" and cond.material is None

    def test_text_image_requires_material_and_lam(self):
        with pytest.raises(ValidationError, match="material"):
            Conditioning(mode="text_image", text="t")

    def test_text_mode_must_not_carry_material(self, toy_backend):
        material = toy_backend.embed_material(block_image())
        with pytest.raises(ValidationError, match="material"):
            Conditioning(mode="text", text="t", material=material)

    def test_unknown_mode(self):
        with pytest.raises(ValidationError, match="mode"):
            Conditioning(mode="image")


class TestToyBackendBasics:
    def test_same_seed_bitwise_identical(self):
        a, b = make_toy_backend(seed=3), make_toy_backend(seed=3)
        z = latent(1)
        ea, _ = a.predict_noise(z, Conditioning.from_text("p"), timestep=500)
        eb, _ = b.predict_noise(z, Conditioning.from_text("p"), timestep=500)
        assert torch.equal(ea, eb)

    def test_different_seeds_differ(self):
        a, b = make_toy_backend(seed=3), make_toy_backend(seed=4)
        z = latent(1)
        ea, _ = a.predict_noise(z, Conditioning.null(), timestep=500)
        eb, _ = b.predict_noise(z, Conditioning.null(), timestep=500)
        assert not torch.equal(ea, eb)

    def test_timestep_changes_prediction(self, toy_backend):
        z = latent(2)
        early, _ = toy_backend.predict_noise(z, Conditioning.null(), timestep=10)
        late, _ = toy_backend.predict_noise(z, Conditioning.null(), timestep=900)
        assert not torch.equal(early, late)

    def test_forward_calls_counts_every_pass(self, toy_backend):
        z = latent(2)
        start = toy_backend.forward_calls
        toy_backend.predict_noise(z, Conditioning.null(), timestep=10)
        toy_backend.predict_noise(z, Conditioning.from_text("p"), record_internals=True, timestep=10)
        assert toy_backend.forward_calls == start + 2

    def test_latent_shape_checked(self, toy_backend):
        with pytest.raises(ValidationError, match="z"):
            toy_backend.predict_noise(latent(0, shape=(4, 4, 4)), Conditioning.null())

    def test_constant_backend_returns_constant(self):
        backend = make_toy_backend(seed=0, constant=0.25)
        eps, _ = backend.predict_noise(latent(5), Conditioning.from_text("p"), timestep=100)
        assert torch.equal(eps, torch.full((4, 8, 8), 0.25, dtype=torch.float64))

    def test_prompt_changes_prediction(self, toy_backend):
        z = latent(2)
        a, _ = toy_backend.predict_noise(z, Conditioning.from_text("a vase"), timestep=100)
        b, _ = toy_backend.predict_noise(z, Conditioning.from_text("a cube"), timestep=100)
        assert not torch.equal(a, b)


class TestInternals:
    def test_shapes_match_metadata(self, toy_backend):
        _, internals = toy_backend.predict_noise(
            latent(1), Conditioning.null(), record_internals=True, timestep=100
        )
        meta = toy_backend.metadata
        assert len(internals.attention_maps) == meta.attention_layer_count
        for amap, shape in zip(internals.attention_maps, meta.attention_map_shapes):
            assert tuple(amap.shape) == shape
        assert tuple(internals.features.shape) == meta.feature_shape

    def test_attention_maps_row_stochastic(self, toy_backend):
        _, internals = toy_backend.predict_noise(
            latent(4), Conditioning.null(), record_internals=True, timestep=100
        )
        for amap in internals.attention_maps:
            assert float(amap.min()) >= 0
            assert torch.allclose(amap.sum(dim=-1), torch.ones(amap.shape[0], dtype=torch.float64), atol=1e-12)

    def test_not_recorded_by_default(self, toy_backend):
        _, internals = toy_backend.predict_noise(latent(1), Conditioning.null(), timestep=100)
        assert internals is None

    def test_internals_differentiable(self, toy_backend):
        z = latent(1)
        leaf = z.data.clone().requires_grad_(True)
        _, internals = toy_backend.predict_noise(
            z.with_data(leaf), Conditioning.null(), record_internals=True, timestep=100
        )
        internals.features.sum().backward()
        assert leaf.grad is not None and float(leaf.grad.abs().sum()) > 0


class TestMaterialRouting:
    def test_lam_zero_matches_any_material(self, toy_backend):
        z = latent(3)
        mat_a = toy_backend.embed_material(block_image(1))
        mat_b = toy_backend.embed_material(block_image(2))
        pyramid = (downsample_mask(square_mask(), (8, 8), space="attention-8x8"),)
        ea, _ = toy_backend.predict_noise(
            z, Conditioning.text_image("t", mat_a, 0.0, pyramid), timestep=100
        )
        eb, _ = toy_backend.predict_noise(
            z, Conditioning.text_image("t", mat_b, 0.0, pyramid), timestep=100
        )
        assert torch.equal(ea, eb)

    def test_prediction_affine_in_lam(self, toy_backend):
        z = latent(3)
        material = toy_backend.embed_material(block_image(1))
        pyramid = (downsample_mask(square_mask(), (8, 8), space="attention-8x8"),)

        def predict(lam):
            eps, _ = toy_backend.predict_noise(
                z, Conditioning.text_image("t", material, lam, pyramid), timestep=100
            )
            return eps

        mid = predict(0.75)
        avg = (predict(0.5) + predict(1.0)) / 2
        assert torch.allclose(mid, avg, atol=1e-12)

    def test_material_changes_prediction_at_positive_lam(self, toy_backend):
        z = latent(3)
        mat_a = toy_backend.embed_material(block_image(1))
        mat_b = toy_backend.embed_material(block_image(2))
        ea, _ = toy_backend.predict_noise(z, Conditioning.text_image("t", mat_a, 0.8), timestep=100)
        eb, _ = toy_backend.predict_noise(z, Conditioning.text_image("t", mat_b, 0.8), timestep=100)
        assert not torch.equal(ea, eb)

    def test_pyramid_without_matching_level_rejected(self, toy_backend):
        z = latent(3)
        material = toy_backend.embed_material(block_image(1))
        pyramid = (downsample_mask(square_mask(), (4, 4), space="attention-4x4"),)
        with pytest.raises(ValidationError, match="mask_pyramid"):
            toy_backend.predict_noise(z, Conditioning.text_image("t", material, 0.8, pyramid), timestep=100)

    def test_embedding_deterministic_with_fingerprint(self, toy_backend):
        img = block_image(4)
        a = toy_backend.embed_material(img)
        b = toy_backend.embed_material(img)
        assert torch.equal(a.tokens, b.tokens)
        assert a.source_fingerprint == b.source_fingerprint
        assert a.tokens.shape == (
            toy_backend.metadata.material_token_count,
            toy_backend.metadata.material_token_dim,
        )


class TestCodec:
    def test_decode_encode_identity_on_block_images(self, toy_backend):
        img = block_image(9)
        back = toy_backend.decode(toy_backend.encode(img))
        assert np.abs(back.pixels - img.pixels).max() < 1e-12

    def test_encode_shape_and_slot(self, toy_backend):
        z = toy_backend.encode(block_image(9))
        assert tuple(z.data.shape) == toy_backend.metadata.latent_shape
        assert z.t == 0

    def test_decode_is_cellwise(self, toy_backend):
        z = toy_backend.encode(block_image(9))
        data = z.data.clone()
        data[:, 2, 3] = data[:, 5, 5]
        img = toy_backend.decode(z.with_data(data))
        a = img.pixels[16:24, 24:32]
        b = img.pixels[40:48, 40:48]
        assert np.array_equal(a, b)

    def test_decode_clamps_to_unit_range(self, toy_backend):
        z = LatentState(torch.full((4, 8, 8), 50.0, dtype=torch.float64), t=0)
        img = toy_backend.decode(z)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0

    def test_encode_rejects_wrong_size(self, toy_backend):
        with pytest.raises(ValidationError, match="image"):
            toy_backend.encode(block_image(0, h=32, w=32))


class TestPretrainedLoader:
    def test_no_locator_and_no_env(self, monkeypatch):
        monkeypatch.delenv("MATFUSE_WEIGHTS_DIR", raising=False)
        with pytest.raises(BackendLoadError, match="MATFUSE_WEIGHTS_DIR"):
            load_pretrained_backend()

    def test_missing_directory(self, tmp_path):
        with pytest.raises(BackendLoadError, match="not found"):
            load_pretrained_backend(str(tmp_path / "nope"))

    def test_missing_component_is_named(self, tmp_path):
        for name in ("unet", "vae", "text_encoder"):
            (tmp_path / name).mkdir()
        with pytest.raises(BackendLoadError, match="tokenizer"):
            load_pretrained_backend(str(tmp_path))

    def test_missing_adapter_reported(self, tmp_path):
        for name in ("unet", "vae", "text_encoder", "tokenizer", "scheduler"):
            (tmp_path / name).mkdir()
        with pytest.raises(BackendLoadError, match="image-prompt adapter unavailable"):
            load_pretrained_backend(str(tmp_path))

    def test_env_var_used_as_locator(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MATFUSE_WEIGHTS_DIR", str(tmp_path / "missing"))
        with pytest.raises(BackendLoadError, match="not found"):
            load_pretrained_backend()
