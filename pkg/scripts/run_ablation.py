#!/usr/bin/env python3
"""Joint image+video vs video-only alignment ablation on the synthetic corpus.

Trains two alignment arms under an identical config — one on the full
image+video sample pool, one restricted to video samples — then evaluates both
with the mock judge and prints the delta-accuracy table. Writes ablation.json
next to the table so `surgvla report` can re-render it.
"""
import argparse
import json
import os
import sys

from surgvla.conversation import ConversationRecord, Round
from surgvla.datasets import make_synthetic_corpus
from surgvla.evaluation import (
    DIMENSIONS,
    DecodingConfig,
    MockJudgeBackend,
    ablation_joint_vs_video_only,
    aggregate,
    judge,
    render_ablation_table,
    respond_in_conversation,
)
from surgvla.training import StageConfig, build_toy_state


def run(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--steps", type=int, default=100)
    args = parser.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)

    corpus = make_synthetic_corpus(seed=args.seed)
    texts = [c.caption for c in corpus.captions]
    texts += [q for r in corpus.vqa_records for q in (r.question, r.answer)]
    joint_pool = corpus.visual_samples
    video_pool = [s for s in joint_pool if s.modality == "video"]
    by_id = {s.sample_id: s for s in joint_pool}

    config = StageConfig(stage="align", learning_rate=0.05, epochs=args.steps,
                         batch_size=4, seed=args.seed)

    def evaluator(state):
        backend = MockJudgeBackend()
        verdicts = []
        for rec in corpus.vqa_records:
            visual = by_id[rec.visual_path]
            reply = respond_in_conversation(
                state, visual.data,
                ConversationRecord(rec.sample_id, [Round(rec.question, "")]), 1,
                DecodingConfig(max_new_tokens=6),
            )
            if not reply.text:
                continue
            for dim in DIMENSIONS:
                verdicts.append(judge(rec.question, rec.answer, reply.text, dim,
                                      backend, sample_id=rec.sample_id))
        return aggregate(verdicts)

    def train_capped(cfg, pool, state):
        from surgvla.training import train
        train(cfg, pool, state, max_steps=args.steps)

    result = ablation_joint_vs_video_only(
        config_video_only=config,
        config_joint=config,
        video_only_corpus=video_pool,
        joint_corpus=joint_pool,
        state_factory=lambda: build_toy_state(seed=args.seed, corpus_texts=texts),
        evaluator=evaluator,
        train_fn=train_capped,
    )
    with open(os.path.join(args.out, "ablation.json"), "w") as f:
        json.dump({"video_only": result.video_only, "joint": result.joint}, f, indent=2)
    table = render_ablation_table(result)
    with open(os.path.join(args.out, "ablation.txt"), "w") as f:
        f.write(table)
    print(table, end="")
    print(f"\nartifacts under {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
