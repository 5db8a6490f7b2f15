"""Visual encoding: frame encoder, temporal/spatial pooling, and projection to the language space.

A video sample with shape T x H x W x C is encoded per-frame into patch
embeddings (T x N x D). Averaging over the frame axis yields temporal features
(N x D); averaging over the patch axis yields spatial features (T x D). Their
concatenation forms the visual tokens, which an affine projection maps into the
language embedding width.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Tuple, Union

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InvalidInputError

Array = Union[np.ndarray, torch.Tensor]


def _as_tensor(x: Array, dtype: torch.dtype | None = None) -> torch.Tensor:
    t = torch.as_tensor(x)
    if dtype is not None:
        t = t.to(dtype)
    elif not t.is_floating_point():
        t = t.to(torch.float32)
    return t


@dataclass
class VideoTensor:
    """Raw video sample: frames x height x width x channels, plus sampling rate."""

    data: np.ndarray
    fps: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise InvalidInputError(
                f"video data must be T x H x W x C, got shape {self.data.shape}"
            )
        if min(self.data.shape) < 1:
            raise InvalidInputError(f"all video axes must be >= 1, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise InvalidInputError("video data contains non-finite values")
        if self.fps <= 0:
            raise InvalidInputError(f"fps must be positive, got {self.fps}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


@dataclass
class PatchEmbeddings:
    """Per-frame patch embeddings, shape T x N x D."""

    data: torch.Tensor

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if self.data.ndim != 3:
            raise InvalidInputError(
                f"patch embeddings must be T x N x D, got shape {tuple(self.data.shape)}"
            )
        if not torch.isfinite(self.data).all():
            raise InvalidInputError("patch embeddings contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_patches(self) -> int:
        return self.data.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.data.shape[2]


@dataclass
class VideoFeatures:
    """Pooled video features: temporal (N x D), spatial (T x D), and their concatenation."""

    temporal: torch.Tensor
    spatial: torch.Tensor
    tokens: torch.Tensor


@dataclass
class ProjectedVisualTokens:
    """Visual tokens after projection into the language embedding width."""

    data: torch.Tensor  # M x D_lm
    modality: str  # "image" | "video"


class FrameEncoder(Protocol):
    """Anything that maps one H x W x C frame to N x D patch embeddings."""

    num_patches: int
    embed_dim: int

    def __call__(self, image: torch.Tensor) -> torch.Tensor: ...


@dataclass(frozen=True)
class EncoderConfig:
    patch_grid: int = 2
    embed_dim: int = 32
    image_size: Tuple[int, int] = (8, 8)
    channels: int = 3
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "patch_grid": self.patch_grid,
            "embed_dim": self.embed_dim,
            "image_size": list(self.image_size),
            "channels": self.channels,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(
            patch_grid=d["patch_grid"],
            embed_dim=d["embed_dim"],
            image_size=tuple(d["image_size"]),
            channels=d["channels"],
            seed=d["seed"],
        )


class PatchEncoder(nn.Module):
    """Toy frame encoder: non-overlapping patch grid followed by one affine map.

    Deterministically initialized from ``config.seed``.
    """

    def __init__(self, config: EncoderConfig = EncoderConfig(), dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        h, w = config.image_size
        g = config.patch_grid
        if h % g != 0 or w % g != 0:
            raise ConfigurationError(
                f"image size {config.image_size} not divisible by patch grid {g}"
            )
        self.patch_h = h // g
        self.patch_w = w // g
        self.num_patches = g * g
        self.embed_dim = config.embed_dim
        in_features = self.patch_h * self.patch_w * config.channels
        gen = torch.Generator().manual_seed(config.seed)
        weight = torch.randn(in_features, config.embed_dim, generator=gen) / np.sqrt(in_features)
        bias = torch.zeros(config.embed_dim)
        self.weight = nn.Parameter(weight.to(dtype))
        self.bias = nn.Parameter(bias.to(dtype))

    def extract_patches(self, image: torch.Tensor) -> torch.Tensor:
        """Split an H x W x C image into N flattened patch vectors (row-major grid order)."""
        h, w = self.config.image_size
        c = self.config.channels
        if tuple(image.shape) != (h, w, c):
            raise ConfigurationError(
                f"encoder expects image of shape {(h, w, c)}, got {tuple(image.shape)}"
            )
        g = self.config.patch_grid
        patches = image.reshape(g, self.patch_h, g, self.patch_w, c)
        patches = patches.permute(0, 2, 1, 3, 4).reshape(self.num_patches, -1)
        return patches

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        patches = self.extract_patches(image.to(self.weight.dtype))
        return patches @ self.weight + self.bias


class IdentityPatchEncoder(nn.Module):
    """Stub encoder whose embeddings are the flattened pixel blocks themselves."""

    def __init__(self, image_size: Tuple[int, int] = (8, 8), channels: int = 3, patch_grid: int = 2):
        super().__init__()
        self.config = EncoderConfig(
            patch_grid=patch_grid,
            embed_dim=(image_size[0] // patch_grid) * (image_size[1] // patch_grid) * channels,
            image_size=image_size,
            channels=channels,
        )
        self._splitter = PatchEncoder(self.config)
        self.num_patches = patch_grid * patch_grid
        self.embed_dim = self.config.embed_dim

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self._splitter.extract_patches(_as_tensor(image))


def encode_image(image: Array, encoder: FrameEncoder) -> PatchEmbeddings:
    """Encode a single H x W x C image into 1 x N x D patch embeddings."""
    t = _as_tensor(image)
    if t.ndim != 3:
        raise InvalidInputError(f"image must be H x W x C, got shape {tuple(t.shape)}")
    return PatchEmbeddings(encoder(t).unsqueeze(0))


def encode_video_frames(video: Union[VideoTensor, Array], encoder: FrameEncoder) -> PatchEmbeddings:
    """Encode every frame of a video; row t equals encode_image on frame t."""
    data = video.data if isinstance(video, VideoTensor) else np.asarray(video)
    if len(data) == 0:
        raise InvalidInputError("video has no frames")
    rows = [encoder(_as_tensor(frame)) for frame in data]
    return PatchEmbeddings(torch.stack(rows, dim=0))


def _mean_full_precision(x: torch.Tensor, dim: int) -> torch.Tensor:
    # accumulate in float64 regardless of the working precision
    return x.to(torch.float64).mean(dim=dim).to(x.dtype)


def _coerce(pe: Union[PatchEmbeddings, Array]) -> torch.Tensor:
    if isinstance(pe, PatchEmbeddings):
        return pe.data
    t = _as_tensor(pe)
    if t.ndim != 3:
        raise InvalidInputError(f"expected T x N x D array, got shape {tuple(t.shape)}")
    return t


def pool_temporal(pe: Union[PatchEmbeddings, Array]) -> torch.Tensor:
    """Average over the frame axis: T x N x D -> N x D."""
    return _mean_full_precision(_coerce(pe), dim=0)


def pool_spatial(pe: Union[PatchEmbeddings, Array]) -> torch.Tensor:
    """Average over the patch axis: T x N x D -> T x D."""
    return _mean_full_precision(_coerce(pe), dim=1)


def assemble_video_tokens(
    temporal: Array, spatial: Array, order: str = "temporal_first"
) -> torch.Tensor:
    """Concatenate pooled features into (N+T) x D visual tokens."""
    t = _as_tensor(temporal)
    s = _as_tensor(spatial)
    if t.ndim != 2 or s.ndim != 2 or t.shape[1] != s.shape[1]:
        raise InvalidInputError(
            f"feature widths must match: temporal {tuple(t.shape)} vs spatial {tuple(s.shape)}"
        )
    if order == "temporal_first":
        return torch.cat([t, s], dim=0)
    if order == "spatial_first":
        return torch.cat([s, t], dim=0)
    raise ConfigurationError(f"unknown concatenation order {order!r}")


def video_features(pe: Union[PatchEmbeddings, Array], order: str = "temporal_first") -> VideoFeatures:
    temporal = pool_temporal(pe)
    spatial = pool_spatial(pe)
    return VideoFeatures(temporal, spatial, assemble_video_tokens(temporal, spatial, order))


@dataclass(frozen=True)
class ProjectionConfig:
    in_dim: int = 32
    out_dim: int = 64
    seed: int = 0

    def to_dict(self) -> dict:
        return {"in_dim": self.in_dim, "out_dim": self.out_dim, "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "ProjectionConfig":
        return ProjectionConfig(in_dim=d["in_dim"], out_dim=d["out_dim"], seed=d["seed"])


class ProjectionMap(nn.Module):
    """Trainable affine map from encoder width D to language width D_lm, applied rowwise."""

    def __init__(self, config: ProjectionConfig = ProjectionConfig(), dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        weight = torch.randn(config.in_dim, config.out_dim, generator=gen) / np.sqrt(config.in_dim)
        self.weight = nn.Parameter(weight.to(dtype))
        self.bias = nn.Parameter(torch.zeros(config.out_dim, dtype=dtype))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens.to(self.weight.dtype) @ self.weight + self.bias


def project_to_language(
    tokens: Array, projection: ProjectionMap, modality: str = "video"
) -> ProjectedVisualTokens:
    """Apply the affine projection rowwise: M x D -> M x D_lm."""
    t = _as_tensor(tokens)
    if t.ndim != 2:
        raise InvalidInputError(f"tokens must be M x D, got shape {tuple(t.shape)}")
    if t.shape[1] != projection.config.in_dim:
        raise ConfigurationError(
            f"projection expects width {projection.config.in_dim}, got {t.shape[1]}"
        )
    return ProjectedVisualTokens(projection(t), modality)


def sample_frames(video: VideoTensor, max_frames: int = 8) -> VideoTensor:
    """Uniform-stride subsample down to at most max_frames frames."""
    t = video.num_frames
    if t <= max_frames:
        return video
    idx = np.linspace(0, t - 1, max_frames).round().astype(int)
    return VideoTensor(video.data[idx], fps=video.fps * max_frames / t)


def encode_sample(
    sample_data: Union[VideoTensor, np.ndarray],
    encoder: FrameEncoder,
    projection: ProjectionMap,
    max_frames: int = 8,
    order: str = "temporal_first",
) -> ProjectedVisualTokens:
    """Full encoding path: image -> N tokens, video -> N+T tokens, projected to D_lm."""
    if isinstance(sample_data, VideoTensor):
        pe = encode_video_frames(sample_frames(sample_data, max_frames), encoder)
        tokens = video_features(pe, order).tokens
        return project_to_language(tokens, projection, modality="video")
    pe = encode_image(sample_data, encoder)
    return project_to_language(pe.data[0], projection, modality="image")
