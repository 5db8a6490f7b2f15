"""Stage-1 alignment: joint image/video batch construction and the modality-to-text contrastive loss.

For a batch of K normalized pairs (x_i, y_i) the loss is the mean over i of
-log softmax_j(x_i . y_j / tau) evaluated at j = i. Samples cut from the same
source video are the positive pairs; everything else in the batch acts as a
negative.
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from typing import List, Sequence, Union

import numpy as np
import torch

from .encoding import VideoTensor
from .errors import ContractViolationError, DegenerateInputError, InsufficientDataError, InvalidInputError

log = logging.getLogger(__name__)

Array = Union[np.ndarray, torch.Tensor]


def _as_tensor(x: Array) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.to(torch.float32)
    return t


def normalize_embeddings(vecs: Array) -> torch.Tensor:
    """Divide each row by its Euclidean norm. Zero rows are rejected."""
    t = _as_tensor(vecs)
    norms = torch.linalg.norm(t, dim=-1)
    zero = (norms == 0).nonzero()
    if len(zero) > 0:
        raise DegenerateInputError(f"zero-norm embedding at row {int(zero[0][0])}")
    return t / norms.unsqueeze(-1)


@dataclass
class EmbeddingBatch:
    """K paired modality/text embedding rows, both expected row-normalized."""

    modality_vecs: torch.Tensor  # K x E
    text_vecs: torch.Tensor  # K x E
    temperature: float = 1.0
    pair_source_ids: Sequence[str] = field(default_factory=list)

    def __post_init__(self):
        self.modality_vecs = _as_tensor(self.modality_vecs)
        self.text_vecs = _as_tensor(self.text_vecs)
        if self.modality_vecs.shape != self.text_vecs.shape:
            raise InvalidInputError(
                f"modality/text shapes differ: {tuple(self.modality_vecs.shape)} vs "
                f"{tuple(self.text_vecs.shape)}"
            )
        if self.modality_vecs.ndim != 2 or self.modality_vecs.shape[0] < 1:
            raise InvalidInputError("embedding batch must be K x E with K >= 1")
        if self.temperature <= 0:
            raise InvalidInputError(f"temperature must be positive, got {self.temperature}")

    @property
    def size(self) -> int:
        return self.modality_vecs.shape[0]


def _check_normalized(t: torch.Tensor, name: str, tol: float = 1e-3):
    norms = torch.linalg.norm(t.detach(), dim=-1)
    off = (norms - 1.0).abs()
    if float(off.max()) > tol:
        i = int(off.argmax())
        raise ContractViolationError(
            f"{name} row {i} has norm {float(norms[i]):.6f}, expected unit norm"
        )


def m2t_loss(batch: EmbeddingBatch, symmetric: bool = False) -> torch.Tensor:
    """Modality-to-text contrastive loss over one joint batch.

    Differentiable w.r.t. both embedding arrays. With ``symmetric=True`` the
    text-to-modality direction is averaged in (off by default).
    """
    _check_normalized(batch.modality_vecs, "modality_vecs")
    _check_normalized(batch.text_vecs, "text_vecs")
    ids = list(batch.pair_source_ids)
    if ids and len(set(ids)) < len(ids):
        log.warning(
            "batch contains repeated source videos %s; same-video off-diagonal pairs "
            "are treated as negatives",
            sorted({i for i in ids if ids.count(i) > 1}),
        )
    logits = batch.modality_vecs @ batch.text_vecs.T / batch.temperature
    # log-softmax with max subtraction keeps small-batch fixtures exact
    logp = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    loss = -logp.diagonal().mean()
    if symmetric:
        logp_t = logits - torch.logsumexp(logits, dim=0, keepdim=True)
        loss = (loss - logp_t.diagonal().mean()) / 2
    return loss


@dataclass
class PooledTextEmbedding:
    vec: torch.Tensor
    pooling_mode: str


def pool_text(states: Array, mode: str = "mean") -> PooledTextEmbedding:
    """Reduce L x E per-position states to one vector: arithmetic mean or last position."""
    t = _as_tensor(states)
    if t.ndim != 2 or t.shape[0] < 1:
        raise InvalidInputError(f"states must be L x E with L >= 1, got shape {tuple(t.shape)}")
    if mode == "mean":
        return PooledTextEmbedding(t.to(torch.float64).mean(dim=0).to(t.dtype), mode)
    if mode == "last_token":
        return PooledTextEmbedding(t[-1], mode)
    raise InvalidInputError(f"unknown text pooling mode {mode!r}")


@dataclass
class VisualSample:
    """One alignment sample: an image or video plus its caption and origin video."""

    sample_id: str
    source_id: str  # id of the video this sample was cut from
    modality: str  # "image" | "video"
    data: Union[np.ndarray, VideoTensor]
    caption: str


@dataclass
class JointBatch:
    """Seed-determined selection of K samples mixing images and videos."""

    samples: List[VisualSample]

    @property
    def sample_ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]

    @property
    def pair_source_ids(self) -> List[str]:
        return [s.source_id for s in self.samples]

    @property
    def modalities(self) -> List[str]:
        return [s.modality for s in self.samples]


def build_joint_batch(samples: Sequence[VisualSample], k: int, seed: int) -> JointBatch:
    """Draw K samples uniformly without replacement, mixing modalities."""
    if len(samples) < k:
        raise InsufficientDataError(f"need {k} samples, pool has {len(samples)}")
    rng = random.Random(seed)
    return JointBatch(rng.sample(list(samples), k))


def batch_log_line(step: int, batch: JointBatch) -> str:
    """One JSONL line recording the batch composition for reproducibility."""
    return json.dumps(
        {"step": step, "sample_ids": batch.sample_ids, "modalities": batch.modalities}
    )
