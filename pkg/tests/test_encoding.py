import numpy as np
import pytest
import torch
from hypothesis import given, settings
import hypothesis.strategies as st

from surgvla.encoding import (
    EncoderConfig,
    IdentityPatchEncoder,
    PatchEncoder,
    ProjectionConfig,
    ProjectionMap,
    VideoTensor,
    assemble_video_tokens,
    encode_image,
    encode_sample,
    encode_video_frames,
    pool_spatial,
    pool_temporal,
    project_to_language,
    sample_frames,
    video_features,
)
from surgvla.errors import ConfigurationError, InvalidInputError


def reference_patch_encode(image, weight, bias, grid):
    """Straight-line reimplementation of the toy encoder, kept independent of
    the production path: explicit loops over grid blocks."""
    h, w, c = image.shape
    ph, pw = h // grid, w // grid
    out = []
    for gy in range(grid):
        for gx in range(grid):
            block = image[gy * ph : (gy + 1) * ph, gx * pw : (gx + 1) * pw, :]
            flat = block.reshape(-1)
            out.append(flat @ weight + bias)
    return np.stack(out)


class TestEncodeImage:
    def test_zero_image_zero_weights(self):
        enc = PatchEncoder(EncoderConfig())
        with torch.no_grad():
            enc.weight.zero_()
            enc.bias.zero_()
        pe = encode_image(np.zeros((8, 8, 3), dtype=np.float32), enc)
        assert pe.data.shape == (1, 4, 32)
        assert torch.all(pe.data == 0)

    def test_identity_stub_returns_pixel_blocks(self, rng):
        enc = IdentityPatchEncoder()
        image = rng.random((8, 8, 3), dtype=np.float32)
        pe = encode_image(image, enc)
        expected = reference_patch_encode(
            image, np.eye(48, dtype=np.float32), np.zeros(48, dtype=np.float32), 2
        )
        np.testing.assert_allclose(pe.data.numpy(), expected[None], rtol=1e-6)

    def test_matches_independent_reimplementation(self, rng, encoder):
        image = rng.random((8, 8, 3), dtype=np.float32)
        pe = encode_image(image, encoder)
        expected = reference_patch_encode(
            image,
            encoder.weight.detach().numpy(),
            encoder.bias.detach().numpy(),
            encoder.config.patch_grid,
        )
        np.testing.assert_allclose(pe.data.detach().numpy(), expected[None], rtol=1e-5)

    def test_dimension_mismatch_names_shapes(self, encoder):
        with pytest.raises(ConfigurationError, match=r"\(8, 8, 3\).*\(4, 4, 3\)"):
            encode_image(np.zeros((4, 4, 3), dtype=np.float32), encoder)

    def test_deterministic(self, rng, encoder):
        image = rng.random((8, 8, 3), dtype=np.float32)
        a = encode_image(image, encoder).data
        b = encode_image(image, encoder).data
        assert torch.equal(a, b)


class TestEncodeVideoFrames:
    def test_single_frame_matches_image_path(self, rng, encoder):
        frame = rng.random((8, 8, 3), dtype=np.float32)
        video = VideoTensor(frame[None])
        assert torch.equal(
            encode_video_frames(video, encoder).data, encode_image(frame, encoder).data
        )

    def test_repeated_frames_give_equal_rows(self, rng, encoder):
        frame = rng.random((8, 8, 3), dtype=np.float32)
        video = VideoTensor(np.repeat(frame[None], 4, axis=0))
        pe = encode_video_frames(video, encoder)
        for t in range(1, 4):
            assert torch.equal(pe.data[t], pe.data[0])

    def test_rows_match_per_frame_calls(self, rng, encoder):
        frames = rng.random((3, 8, 8, 3), dtype=np.float32)
        pe = encode_video_frames(VideoTensor(frames), encoder)
        for t in range(3):
            assert torch.equal(pe.data[t], encode_image(frames[t], encoder).data[0])

    def test_empty_video_rejected(self, encoder):
        with pytest.raises(InvalidInputError):
            VideoTensor(np.zeros((0, 8, 8, 3)))
        with pytest.raises(InvalidInputError):
            encode_video_frames(np.zeros((0, 8, 8, 3)), encoder)


class TestPooling:
    def test_temporal_identical_frames(self, rng):
        e = rng.random((1, 4, 8))
        pe = np.repeat(e, 5, axis=0)
        np.testing.assert_allclose(pool_temporal(pe).numpy(), e[0], atol=1e-9)

    def test_temporal_hand_mean(self):
        pe = np.array([[[1.0, 2.0]], [[3.0, 4.0]]])
        np.testing.assert_allclose(pool_temporal(pe).numpy(), [[2.0, 3.0]], atol=1e-12)

    def test_spatial_hand_mean(self):
        pe = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_allclose(pool_spatial(pe).numpy(), [[2.0, 3.0]], atol=1e-12)

    def test_spatial_identical_patches(self, rng):
        frames = rng.random((3, 1, 8))
        pe = np.repeat(frames, 4, axis=1)
        np.testing.assert_allclose(pool_spatial(pe).numpy(), frames[:, 0], atol=1e-9)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariance(self, seed):
        r = np.random.default_rng(seed)
        t, n, d = r.integers(1, 9, size=3)
        pe = r.standard_normal((t, n, d))
        perm_t = r.permutation(t)
        perm_n = r.permutation(n)
        np.testing.assert_allclose(
            pool_temporal(pe).numpy(), pool_temporal(pe[perm_t]).numpy(), atol=1e-12
        )
        np.testing.assert_allclose(
            pool_spatial(pe).numpy(), pool_spatial(pe[:, perm_n]).numpy(), atol=1e-12
        )

    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
    @settings(max_examples=30, deadline=None)
    def test_linearity(self, seed, a, b):
        r = np.random.default_rng(seed)
        x = r.standard_normal((3, 4, 5))
        y = r.standard_normal((3, 4, 5))
        np.testing.assert_allclose(
            pool_temporal(a * x + b * y).numpy(),
            a * pool_temporal(x).numpy() + b * pool_temporal(y).numpy(),
            atol=1e-9,
        )
        np.testing.assert_allclose(
            pool_spatial(a * x + b * y).numpy(),
            a * pool_spatial(x).numpy() + b * pool_spatial(y).numpy(),
            atol=1e-9,
        )

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_bounds(self, seed):
        r = np.random.default_rng(seed)
        pe = r.standard_normal((4, 3, 6))
        pt = pool_temporal(pe).numpy()
        assert np.all(pt >= pe.min(axis=0) - 1e-12) and np.all(pt <= pe.max(axis=0) + 1e-12)
        ps = pool_spatial(pe).numpy()
        assert np.all(ps >= pe.min(axis=1) - 1e-12) and np.all(ps <= pe.max(axis=1) + 1e-12)


class TestAssemble:
    def test_concatenation_order(self):
        temporal = np.array([[1.0, 1.0], [2.0, 2.0]])
        spatial = np.array([[3.0, 3.0]])
        tokens = assemble_video_tokens(temporal, spatial)
        np.testing.assert_array_equal(tokens.numpy(), [[1, 1], [2, 2], [3, 3]])

    def test_spatial_first_option(self):
        tokens = assemble_video_tokens(
            np.ones((1, 2)), np.zeros((1, 2)), order="spatial_first"
        )
        np.testing.assert_array_equal(tokens.numpy(), [[0, 0], [1, 1]])

    def test_zero_inputs(self):
        tokens = assemble_video_tokens(np.zeros((2, 3)), np.zeros((4, 3)))
        assert tokens.shape == (6, 3)
        assert torch.all(tokens == 0)

    def test_shape_arithmetic(self, rng):
        tokens = assemble_video_tokens(rng.random((4, 32)), rng.random((6, 32)))
        assert tokens.shape == (10, 32)

    def test_width_mismatch(self):
        with pytest.raises(InvalidInputError):
            assemble_video_tokens(np.zeros((2, 3)), np.zeros((2, 4)))


class TestProjection:
    def test_identity(self):
        proj = ProjectionMap(ProjectionConfig(in_dim=3, out_dim=3))
        with torch.no_grad():
            proj.weight.copy_(torch.eye(3))
            proj.bias.zero_()
        x = torch.tensor([[1.0, 2.0, 3.0]])
        out = project_to_language(x, proj, modality="image")
        assert torch.equal(out.data, x)
        assert out.modality == "image"

    def test_zero_input_gives_bias_rows(self):
        proj = ProjectionMap(ProjectionConfig(in_dim=2, out_dim=3))
        with torch.no_grad():
            proj.bias.copy_(torch.tensor([1.0, 2.0, 3.0]))
        out = project_to_language(torch.zeros(4, 2), proj)
        for row in out.data:
            assert torch.equal(row, torch.tensor([1.0, 2.0, 3.0]))

    def test_hand_matrix_multiply(self):
        proj = ProjectionMap(ProjectionConfig(in_dim=2, out_dim=3))
        with torch.no_grad():
            proj.weight.copy_(torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]]))
            proj.bias.zero_()
        out = project_to_language(torch.tensor([[1.0, 2.0]]), proj)
        assert torch.equal(out.data, torch.tensor([[1.0, 2.0, 3.0]]))

    def test_width_mismatch(self, projection):
        with pytest.raises(ConfigurationError):
            project_to_language(torch.zeros(2, 16), projection)


class TestSamplePaths:
    def test_image_path_emits_n_tokens(self, rng, encoder, projection):
        out = encode_sample(rng.random((8, 8, 3), dtype=np.float32), encoder, projection)
        assert out.modality == "image"
        assert out.data.shape == (4, 64)

    def test_video_path_emits_n_plus_t_tokens(self, rng, encoder, projection):
        video = VideoTensor(rng.random((6, 8, 8, 3), dtype=np.float32))
        out = encode_sample(video, encoder, projection)
        assert out.modality == "video"
        assert out.data.shape == (4 + 6, 64)

    def test_long_video_is_strided_to_cap(self, rng, encoder, projection):
        video = VideoTensor(rng.random((20, 8, 8, 3), dtype=np.float32))
        sub = sample_frames(video, max_frames=8)
        assert sub.num_frames == 8
        out = encode_sample(video, encoder, projection, max_frames=8)
        assert out.data.shape == (4 + 8, 64)

    def test_video_features_shapes(self, rng):
        pe = rng.standard_normal((5, 4, 8))
        vf = video_features(pe)
        assert vf.temporal.shape == (4, 8)
        assert vf.spatial.shape == (5, 8)
        assert vf.tokens.shape == (9, 8)
        np.testing.assert_array_equal(vf.tokens[:4].numpy(), vf.temporal.numpy())
