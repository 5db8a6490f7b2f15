"""Two-stage optimization: contrastive visual-understanding alignment (stage 1)
and autoregressive instruction tuning (stage 2), with checkpointing.

Stage 1 updates the projection (optionally the encoder) against the
modality-to-text loss over joint image/video batches. Stage 2 updates the
projection and language model against the answer-token negative log-likelihood
with teacher forcing.
"""
from __future__ import annotations

import json
import math
import os
import random
import shutil
import tempfile
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import contrastive, encoding
from .contrastive import EmbeddingBatch, JointBatch, VisualSample, build_joint_batch, m2t_loss
from .conversation import (
    ChatTemplate,
    ConversationRecord,
    SplicedExample,
    TokenizedExample,
    WhitespaceTokenizer,
    render_conversation,
    splice_visual,
    tokenize_and_mask,
)
from .encoding import EncoderConfig, PatchEncoder, ProjectionConfig, ProjectionMap, encode_sample
from .errors import CheckpointError, InvalidInputError, NoSupervisionError, SurgvlaError
from .language_model import LMConfig, TinyDecoderLM

CHECKPOINT_FORMAT_VERSION = 1
# stored float16 blobs widen to float32 on load; all other dtypes load as stored
DTYPE_WIDENING_RULE = "float16->float32"

PART_NAMES = ("encoder", "projection", "language_model")


@dataclass
class StageConfig:
    """Hyperparameters for one training stage."""

    stage: str  # "align" | "instruct"
    learning_rate: float = 1e-5
    epochs: int = 3
    batch_size: int = 16
    seed: int = 0
    precision: str = "full"  # "full" | "half"
    trainable_parts: Tuple[str, ...] = ()
    grad_clip: Optional[float] = 1.0
    text_pooling: str = "mean"
    symmetric_loss: bool = False

    def __post_init__(self):
        if self.stage not in ("align", "instruct"):
            raise InvalidInputError(f"unknown stage {self.stage!r}")
        # zero is allowed as a degenerate identity step
        if self.learning_rate < 0:
            raise InvalidInputError("learning rate must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidInputError("epochs must be >= 0 and batch size >= 1")
        if self.precision not in ("full", "half"):
            raise InvalidInputError(f"unknown precision {self.precision!r}")
        if not self.trainable_parts:
            self.trainable_parts = (
                ("projection",) if self.stage == "align" else ("projection", "language_model")
            )
        unknown = set(self.trainable_parts) - set(PART_NAMES)
        if unknown:
            raise InvalidInputError(f"unknown trainable parts {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["trainable_parts"] = list(self.trainable_parts)
        return d


@dataclass
class InstructExample:
    """One supervised conversation bound to its visual sample."""

    record: ConversationRecord
    visual: VisualSample


@dataclass
class TrainState:
    """Model parts, optimizer, and metric history for a run."""

    encoder: PatchEncoder
    projection: ProjectionMap
    lm: TinyDecoderLM
    tokenizer: WhitespaceTokenizer
    template: ChatTemplate = ChatTemplate()
    concat_order: str = "temporal_first"
    max_frames: int = 8
    step: int = 0
    history: List[dict] = field(default_factory=list)
    optimizer: Optional[torch.optim.Optimizer] = None
    _optim_key: Optional[tuple] = None

    def parts(self) -> Dict[str, torch.nn.Module]:
        return {
            "encoder": self.encoder,
            "projection": self.projection,
            "language_model": self.lm,
        }

    def named_parameters(self) -> Dict[str, torch.nn.Parameter]:
        out = {}
        for part, module in self.parts().items():
            for name, p in module.named_parameters():
                out[f"{part}.{name}"] = p
        return out


def build_toy_state(
    seed: int = 0,
    corpus_texts: Sequence[str] = (),
    encoder_config: Optional[EncoderConfig] = None,
    d_lm: int = 64,
    template: ChatTemplate = ChatTemplate(),
) -> TrainState:
    """Construct the default desk-scale model stack, deterministically from a seed."""
    enc_cfg = encoder_config or EncoderConfig(seed=seed)
    encoder = PatchEncoder(enc_cfg)
    projection = ProjectionMap(ProjectionConfig(in_dim=enc_cfg.embed_dim, out_dim=d_lm, seed=seed + 1))
    tokenizer = WhitespaceTokenizer(template)
    texts = list(corpus_texts) + [
        template.system_prompt,
        template.user_marker,
        template.assistant_marker,
    ]
    tokenizer.fit(texts)
    lm = TinyDecoderLM(LMConfig(vocab_size=tokenizer.vocab_size + 64, dim=d_lm, seed=seed + 2))
    return TrainState(encoder, projection, lm, tokenizer, template)


def autoregressive_nll(
    logits: torch.Tensor, example: Union[TokenizedExample, SplicedExample]
) -> torch.Tensor:
    """Mean negative log-likelihood over the supervised (mask-1) positions.

    ``logits[i]`` must already be the model's distribution for the token at
    position i, i.e. produced from the prefix up to i-1.
    """
    token_ids = torch.as_tensor(list(example.token_ids), dtype=torch.long)
    mask = torch.as_tensor(list(example.loss_mask), dtype=torch.bool)
    if logits.shape[0] != len(token_ids):
        raise InvalidInputError(
            f"logits length {logits.shape[0]} != sequence length {len(token_ids)}"
        )
    if not bool(mask.any()):
        raise NoSupervisionError("loss mask selects no positions")
    logp = torch.log_softmax(logits, dim=-1)
    gold = logp[mask].gather(1, token_ids[mask].unsqueeze(1)).squeeze(1)
    return -gold.mean()


def modality_text_vectors(
    batch: JointBatch, state: TrainState, text_pooling: str = "mean"
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Pooled per-sample modality and caption embeddings, unnormalized."""
    xs, ys = [], []
    for sample in batch.samples:
        projected = encode_sample(
            sample.data, state.encoder, state.projection,
            max_frames=state.max_frames, order=state.concat_order,
        )
        xs.append(projected.data.to(torch.float64).mean(dim=0).to(projected.data.dtype))
        ids = state.tokenizer.encode(sample.caption)
        if not ids:
            raise InvalidInputError(f"caption of sample {sample.sample_id} tokenizes to nothing")
        states = state.lm.embed(ids)
        ys.append(contrastive.pool_text(states, text_pooling).vec)
    return torch.stack(xs), torch.stack(ys)


def _get_optimizer(state: TrainState, config: StageConfig) -> torch.optim.Optimizer:
    key = (config.stage, config.trainable_parts, config.learning_rate)
    if state.optimizer is None or state._optim_key != key:
        params = []
        for part in config.trainable_parts:
            params.extend(state.parts()[part].parameters())
        # adaptive-moment optimizer, default betas, no weight decay
        state.optimizer = torch.optim.Adam(params, lr=config.learning_rate)
        state._optim_key = key
    return state.optimizer


def _apply_step(loss: torch.Tensor, state: TrainState, config: StageConfig, context: str):
    if not torch.isfinite(loss):
        norms = {k: float(v.detach().norm()) for k, v in state.named_parameters().items()}
        raise SurgvlaError(f"non-finite loss at step {state.step} ({context}); param norms {norms}")
    opt = _get_optimizer(state, config)
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if config.grad_clip is not None:
        params = [p for g in opt.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
    opt.step()
    state.step += 1


def stage1_align_step(
    batch: JointBatch, state: TrainState, config: StageConfig
) -> float:
    """One optimizer step on the modality-to-text loss over a joint batch."""
    xs, ys = modality_text_vectors(batch, state, config.text_pooling)
    emb = EmbeddingBatch(
        contrastive.normalize_embeddings(xs),
        contrastive.normalize_embeddings(ys),
        temperature=1.0,
        pair_source_ids=batch.pair_source_ids,
    )
    loss = m2t_loss(emb, symmetric=config.symmetric_loss)
    _apply_step(loss, state, config, context=f"align batch {batch.sample_ids}")
    value = float(loss.detach())
    state.history.append({"step": state.step, "stage": "align", "loss": value})
    return value


def instruct_example_loss(example: InstructExample, state: TrainState) -> torch.Tensor:
    """Teacher-forced answer NLL for one conversation with its visual input."""
    rendered = render_conversation(example.record, state.template)
    answers = [r.answer for r in example.record.rounds if r.answer]
    tokenized = tokenize_and_mask(rendered, answers, state.tokenizer, state.template)
    projected = encode_sample(
        example.visual.data, state.encoder, state.projection,
        max_frames=state.max_frames, order=state.concat_order,
    )
    spliced = splice_visual(tokenized, projected.data, state.lm.embed)
    logits = state.lm(spliced.embeddings)
    # logits[:-1] predict tokens[1:]
    shifted = SplicedExample(
        embeddings=spliced.embeddings[1:],
        token_ids=spliced.token_ids[1:],
        loss_mask=spliced.loss_mask[1:],
    )
    return autoregressive_nll(logits[:-1], shifted)


def stage2_instruct_step(
    examples: Sequence[InstructExample], state: TrainState, config: StageConfig
) -> float:
    """One optimizer step on the mean answer NLL over a batch of conversations."""
    if not examples:
        raise InvalidInputError("empty instruct batch")
    losses = [instruct_example_loss(ex, state) for ex in examples]
    loss = torch.stack(losses).mean()
    _apply_step(loss, state, config, context=f"instruct batch of {len(examples)}")
    value = float(loss.detach())
    state.history.append({"step": state.step, "stage": "instruct", "loss": value})
    return value


def _instruct_batches(corpus: Sequence[InstructExample], config: StageConfig,
                      start_epoch: int, epochs: int):
    for epoch in range(start_epoch, start_epoch + epochs):
        order = list(range(len(corpus)))
        random.Random(config.seed * 31 + epoch).shuffle(order)
        for start in range(0, len(order), config.batch_size):
            yield epoch, [corpus[j] for j in order[start : start + config.batch_size]]


def train(
    config: StageConfig,
    corpus: Sequence,
    state: TrainState,
    out_dir: Optional[str] = None,
    max_steps: Optional[int] = None,
) -> TrainState:
    """Run one stage over the corpus: epochs x ceil(len/batch) steps, epoch
    checkpoints, and a metrics JSONL stream."""
    if not corpus:
        raise InvalidInputError("training corpus is empty")
    metrics_path = batch_log_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        batch_log_path = os.path.join(out_dir, "batches.jsonl")

    def log_metric(loss: float, lr: float, wall_ms: float):
        if metrics_path:
            with open(metrics_path, "a") as f:
                f.write(json.dumps({
                    "step": state.step, "stage": config.stage, "loss": loss,
                    "lr": lr, "wall_ms": round(wall_ms, 3),
                }) + "\n")

    steps_per_epoch = math.ceil(len(corpus) / config.batch_size)
    done = 0
    if config.stage == "align":
        total = config.epochs * steps_per_epoch
        if max_steps is not None:
            total = min(total, max_steps)
        for _ in range(total):
            # batch composition keyed to the global step so resumed runs replay
            # the exact uninterrupted schedule
            batch = build_joint_batch(
                corpus, min(config.batch_size, len(corpus)),
                seed=config.seed * 1_000_003 + state.step,
            )
            if batch_log_path:
                with open(batch_log_path, "a") as f:
                    f.write(contrastive.batch_log_line(state.step, batch) + "\n")
            t0 = time.monotonic()
            loss = stage1_align_step(batch, state, config)
            log_metric(loss, config.learning_rate, (time.monotonic() - t0) * 1000)
            done += 1
            if out_dir and done % steps_per_epoch == 0:
                save_checkpoint(state, os.path.join(out_dir, f"checkpoint-epoch{state.step // steps_per_epoch}"),
                                precision=config.precision, config=config)
    else:
        start_epoch = state.step // steps_per_epoch
        for epoch, batch in _instruct_batches(corpus, config, start_epoch, config.epochs):
            if max_steps is not None and done >= max_steps:
                break
            t0 = time.monotonic()
            loss = stage2_instruct_step(batch, state, config)
            log_metric(loss, config.learning_rate, (time.monotonic() - t0) * 1000)
            done += 1
            if out_dir and state.step % steps_per_epoch == 0:
                save_checkpoint(state, os.path.join(out_dir, f"checkpoint-epoch{state.step // steps_per_epoch}"),
                                precision=config.precision, config=config)
    return state


def save_checkpoint(
    state: TrainState,
    path: str,
    precision: str = "full",
    config: Optional[StageConfig] = None,
):
    """Write a checkpoint directory atomically: manifest.json + parameter blobs."""
    params = {}
    dtype_table = {}
    for name, p in state.named_parameters().items():
        arr = p.detach().cpu().numpy()
        if precision == "half":
            arr = arr.astype(np.float16)
        params[name] = arr
        dtype_table[name] = {"shape": list(arr.shape), "dtype": str(arr.dtype)}
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": state.step,
        "precision": precision,
        "dtype_widening": DTYPE_WIDENING_RULE,
        "concat_order": state.concat_order,
        "max_frames": state.max_frames,
        "encoder_config": state.encoder.config.to_dict(),
        "projection_config": state.projection.config.to_dict(),
        "lm_config": state.lm.config.to_dict(),
        "template": state.template.to_dict(),
        "tokenizer_vocab": state.tokenizer.vocab_state(),
        "stage_config": config.to_dict() if config else None,
        "params": dtype_table,
    }
    parent = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=".ckpt-tmp-")
    try:
        np.savez(os.path.join(tmp, "params.npz"), **params)
        if state.optimizer is not None:
            torch.save(
                {"state_dict": state.optimizer.state_dict(), "optim_key": state._optim_key},
                os.path.join(tmp, "optimizer.pt"),
            )
        with open(os.path.join(tmp, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2)
        if os.path.exists(path):
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_checkpoint(path: str) -> TrainState:
    """Rebuild a TrainState from a checkpoint directory, validating shapes/dtypes."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"no manifest.json under {path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")

    template = ChatTemplate(**manifest["template"])
    tokenizer = WhitespaceTokenizer.from_vocab_state(manifest["tokenizer_vocab"], template)
    state = TrainState(
        encoder=PatchEncoder(EncoderConfig.from_dict(manifest["encoder_config"])),
        projection=ProjectionMap(ProjectionConfig.from_dict(manifest["projection_config"])),
        lm=TinyDecoderLM(LMConfig.from_dict(manifest["lm_config"])),
        tokenizer=tokenizer,
        template=template,
        concat_order=manifest["concat_order"],
        max_frames=manifest["max_frames"],
        step=manifest["step"],
    )
    blobs = np.load(os.path.join(path, "params.npz"))
    named = state.named_parameters()
    for name, meta in manifest["params"].items():
        if name not in blobs:
            raise CheckpointError(f"parameter blob missing for {name}")
        arr = blobs[name]
        if list(arr.shape) != meta["shape"] or str(arr.dtype) != meta["dtype"]:
            raise CheckpointError(
                f"blob for {name} has shape {list(arr.shape)} dtype {arr.dtype}, "
                f"manifest says {meta['shape']} {meta['dtype']}"
            )
        if name not in named:
            raise CheckpointError(f"checkpoint parameter {name} unknown to this model")
        target = named[name]
        if list(target.shape) != meta["shape"]:
            raise CheckpointError(
                f"manifest shape {meta['shape']} for {name} does not match model "
                f"shape {list(target.shape)}"
            )
        if arr.dtype == np.float16:
            arr = arr.astype(np.float32)
        with torch.no_grad():
            target.copy_(torch.from_numpy(arr.copy()).to(target.dtype))
    missing = set(named) - set(manifest["params"])
    if missing:
        raise CheckpointError(f"manifest missing parameters: {sorted(missing)}")

    opt_path = os.path.join(path, "optimizer.pt")
    if os.path.exists(opt_path) and manifest.get("stage_config"):
        saved = torch.load(opt_path, weights_only=False)
        cfg_d = dict(manifest["stage_config"])
        cfg_d["trainable_parts"] = tuple(cfg_d["trainable_parts"])
        cfg = StageConfig(**cfg_d)
        opt = _get_optimizer(state, cfg)
        opt.load_state_dict(saved["state_dict"])
    return state
