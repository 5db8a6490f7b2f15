"""Tiny decoder-only transformer used as the injectable language model.

Small enough for CPU gradient checks; the interface (embed tokens, forward over
an embedding sequence, logits over the vocabulary) is what a real backbone
would expose.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Union

import torch
from torch import nn

from .errors import ConfigurationError, InvalidInputError


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = 256
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "dim": self.dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "max_seq": self.max_seq,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "LMConfig":
        return LMConfig(**d)


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ConfigurationError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=-1)
        def heads(t):
            return t.view(s, self.n_heads, self.head_dim).transpose(0, 1)
        q, k, v = heads(q), heads(k), heads(v)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        causal = torch.triu(torch.ones(s, s, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        attn = torch.softmax(scores, dim=-1) @ v
        attn = attn.transpose(0, 1).reshape(s, d)
        x = x + self.attn_out(attn)
        x = x + self.mlp(self.ln2(x))
        return x


class TinyDecoderLM(nn.Module):
    """Two-layer causal transformer over a small vocabulary."""

    def __init__(self, config: LMConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.tok_emb = nn.Embedding(config.vocab_size, config.dim)
        self.pos_emb = nn.Embedding(config.max_seq, config.dim)
        self.blocks = nn.ModuleList(
            DecoderBlock(config.dim, config.n_heads) for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.dim)
        self.head = nn.Linear(config.dim, config.vocab_size)
        self.to(dtype)

    @property
    def dim(self) -> int:
        return self.config.dim

    def embed(self, token_ids: Sequence[int]) -> torch.Tensor:
        """Token embeddings only (no positions); used for splicing visual rows."""
        ids = torch.as_tensor(list(token_ids), dtype=torch.long)
        return self.tok_emb(ids)

    def forward(self, inputs: Union[torch.Tensor, Sequence[int]]) -> torch.Tensor:
        """Logits over the vocabulary for an S x D embedding sequence or id list."""
        if isinstance(inputs, torch.Tensor) and inputs.is_floating_point():
            x = inputs
        else:
            x = self.embed(inputs)
        s = x.shape[0]
        if s > self.config.max_seq:
            raise InvalidInputError(f"sequence length {s} exceeds max {self.config.max_seq}")
        pos = self.pos_emb(torch.arange(s, device=x.device))
        x = x.to(pos.dtype) + pos
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))
