"""Command-line entry point: data generation, ingestion, two-stage training,
evaluation, report rendering, and an interactive chat demo.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .contrastive import VisualSample
from .conversation import ConversationRecord, Round
from .datagen import (
    CachingClient,
    MockBackend,
    OpenAICompatibleBackend,
    SourceCaption,
    build_corpus,
    write_corpus_jsonl,
)
from .datasets import load_cholec80_vqa, load_endovis18_vqa, load_psiava_vqa, make_synthetic_corpus
from .encoding import VideoTensor
from .errors import SurgvlaError
from .evaluation import (
    BenchmarkReport,
    DecodingConfig,
    MockJudgeBackend,
    aggregate,
    ablation_delta,
    judge,
    render_ablation_table,
    render_dimension_table,
    render_vqa_table,
    respond_in_conversation,
    write_verdicts_jsonl,
)
from .training import InstructExample, StageConfig, build_toy_state, load_checkpoint, save_checkpoint, train

TASK_ALIASES = {"conv": "conversation", "detail": "detail_description", "reason": "complex_reasoning"}

KNOWN_CONFIG_KEYS = {
    "learning_rate", "epochs", "batch_size", "seed", "precision", "trainable_parts",
    "grad_clip", "corpus_videos", "corpus_frames", "max_steps",
}


def read_flat_config(path: str) -> Dict[str, str]:
    """Flat key=value config files; unknown keys are rejected."""
    out: Dict[str, str] = {}
    with open(path) as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SurgvlaError(f"{path} line {i + 1}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in KNOWN_CONFIG_KEYS:
                raise SurgvlaError(f"{path} line {i + 1}: unknown config key {key!r}")
            out[key] = value
    return out


def _stage_config(stage: str, cfg: Dict[str, str]) -> StageConfig:
    kwargs: dict = {"stage": stage}
    if "learning_rate" in cfg:
        kwargs["learning_rate"] = float(cfg["learning_rate"])
    if "epochs" in cfg:
        kwargs["epochs"] = int(cfg["epochs"])
    if "batch_size" in cfg:
        kwargs["batch_size"] = int(cfg["batch_size"])
    if "seed" in cfg:
        kwargs["seed"] = int(cfg["seed"])
    if "precision" in cfg:
        kwargs["precision"] = cfg["precision"]
    if "trainable_parts" in cfg:
        kwargs["trainable_parts"] = tuple(cfg["trainable_parts"].split(","))
    if "grad_clip" in cfg:
        kwargs["grad_clip"] = None if cfg["grad_clip"] == "off" else float(cfg["grad_clip"])
    return StageConfig(**kwargs)


def _echo_run_config(out_dir: str, payload: dict):
    os.makedirs(out_dir, exist_ok=True)
    payload = dict(payload)
    payload["surgvla_version"] = __version__
    with open(os.path.join(out_dir, "run_config.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _parse_tasks(spec: str) -> List[str]:
    tasks = []
    for t in spec.split(","):
        t = t.strip()
        tasks.append(TASK_ALIASES.get(t, t))
    return tasks


def cmd_generate_data(args) -> int:
    captions = []
    with open(args.captions) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                captions.append(SourceCaption(
                    d["sample_id"], d["caption"],
                    d.get("dataset", "synthetic"), d.get("modality", "video"),
                ))
    if args.backend == "mock":
        backend = MockBackend()
    else:
        backend = OpenAICompatibleBackend(args.base_url, args.model)
    client = CachingClient(backend, cache_path=args.cache)
    records, stats = build_corpus(captions, _parse_tasks(args.tasks), client)
    write_corpus_jsonl(records, args.out)
    stats_path = args.out + ".stats.json"
    with open(stats_path, "w") as f:
        json.dump(stats.to_dict(), f, indent=2)
    print(f"wrote {stats.total} records to {args.out} (stats: {stats_path})")
    return 0


def cmd_ingest(args) -> int:
    loaders = {
        "cholec80": load_cholec80_vqa,
        "endovis18": load_endovis18_vqa,
        "psiava": load_psiava_vqa,
    }
    records, manifest = loaders[args.dataset](args.root)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "records.jsonl"), "w") as f:
        for r in records:
            f.write(json.dumps(asdict(r)) + "\n")
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest.to_dict(), f, indent=2)
    msg = f"ingested {manifest.total} records from {args.dataset}"
    if manifest.total_discrepancy:
        msg += (f" (NOTE: differs from the published total "
                f"{manifest.expected_total} by {manifest.total_discrepancy:+d})")
    print(msg)
    return 0


def _synthetic_setup(cfg: Dict[str, str], seed: int):
    sizes = {
        "videos": int(cfg.get("corpus_videos", 4)),
        "frames": int(cfg.get("corpus_frames", 8)),
    }
    return make_synthetic_corpus(seed=seed, sizes=sizes)


def _instruct_corpus(corpus, records: Optional[List[dict]], state) -> List[InstructExample]:
    by_id = {s.sample_id: s for s in corpus.visual_samples}
    examples = []
    if records is None:
        client = CachingClient(MockBackend())
        gen_records, _ = build_corpus(corpus.captions, list(TASK_ALIASES.values()), client)
        records = [r.to_record() for r in gen_records]
    for d in records:
        visual = by_id.get(d["sample_id"])
        if visual is None:
            continue
        rec = ConversationRecord(
            visual_ref=d["sample_id"],
            rounds=[Round(r["q"], r["a"]) for r in d["rounds"]],
            task_kind=d["task_kind"],
        )
        examples.append(InstructExample(rec, visual))
    return examples


def cmd_train(args) -> int:
    cfg = read_flat_config(args.config) if args.config else {}
    config = _stage_config(args.stage, cfg)
    corpus = _synthetic_setup(cfg, config.seed)
    _echo_run_config(args.out, {"subcommand": "train", "stage": args.stage,
                                "config": config.to_dict(), "flat_config": cfg,
                                "seed": config.seed})
    if args.resume:
        state = load_checkpoint(args.resume)
    else:
        texts = [c.caption for c in corpus.captions]
        texts += [q for r in corpus.vqa_records for q in (r.question, r.answer)]
        state = build_toy_state(seed=config.seed, corpus_texts=texts)
    max_steps = int(cfg["max_steps"]) if "max_steps" in cfg else None
    if args.stage == "align":
        train(config, corpus.visual_samples, state, out_dir=args.out, max_steps=max_steps)
    else:
        records = None
        if args.corpus:
            from .datagen import read_corpus_jsonl
            records = read_corpus_jsonl(args.corpus)
        examples = _instruct_corpus(corpus, records, state)
        train(config, examples, state, out_dir=args.out, max_steps=max_steps)
    final = os.path.join(args.out, "checkpoint-final")
    save_checkpoint(state, final, precision=config.precision, config=config)
    losses = [h["loss"] for h in state.history]
    print(f"trained {len(losses)} steps; final loss {losses[-1]:.4f}; checkpoint {final}")
    return 0


def cmd_evaluate(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg_fingerprint = f"checkpoint={os.path.abspath(args.checkpoint)}"
    corpus = make_synthetic_corpus(seed=args.seed)
    by_path = {s.sample_id: s for s in corpus.visual_samples}
    judge_backend = MockJudgeBackend()
    if args.judge != "mock":
        print("only the mock judge is wired into the CLI; live judges are library-level",
              file=sys.stderr)
        return 1
    dims = _parse_tasks(args.dims)
    verdicts = []
    responses: Dict[str, str] = {}
    eval_records = [r for r in corpus.vqa_records if r.split == "test"] or corpus.vqa_records
    for rec in eval_records:
        visual = by_path[rec.visual_path]
        reply = respond_in_conversation(
            state, visual.data,
            ConversationRecord(rec.sample_id, [Round(rec.question, "")]), 1,
            DecodingConfig(max_new_tokens=args.max_new_tokens),
        )
        responses[rec.sample_id] = reply.text
        for dim in dims:
            if reply.text:
                verdicts.append(judge(rec.question, rec.answer, reply.text, dim,
                                      judge_backend, sample_id=rec.sample_id))
    os.makedirs(args.out, exist_ok=True)
    _echo_run_config(args.out, {"subcommand": "evaluate", "checkpoint": args.checkpoint,
                                "judge": args.judge, "dims": dims, "seed": args.seed})
    from .evaluation import vqa_accuracy
    report = BenchmarkReport(
        model_name=args.name,
        dimension_results=aggregate(verdicts),
        vqa_accuracies=vqa_accuracy(eval_records, responses),
        config_fingerprint=cfg_fingerprint,
    )
    write_verdicts_jsonl(verdicts, os.path.join(args.out, "verdicts.jsonl"))
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    print(f"evaluated {len(eval_records)} samples; report in {args.out}/report.json")
    return 0


def cmd_report(args) -> int:
    report_path = os.path.join(args.run, "report.json")
    if not os.path.exists(report_path):
        print(f"no report.json under {args.run}", file=sys.stderr)
        return 1
    with open(report_path) as f:
        report = BenchmarkReport.from_dict(json.load(f))
    out = render_dimension_table([report])
    out += "\n" + render_vqa_table([report], datasets=sorted(report.vqa_accuracies) or
                                   ("cholec80", "endovis18", "psiava"))
    ablation_path = os.path.join(args.run, "ablation.json")
    if os.path.exists(ablation_path):
        with open(ablation_path) as f:
            d = json.load(f)
        out += "\n" + render_ablation_table(ablation_delta(d["video_only"], d["joint"]))
    for note in report.notes:
        out += f"\nNote: {note}\n"
    print(out, end="")
    return 0


def chat_repl(state, visual, inp=sys.stdin, out=sys.stdout,
              decoding: DecodingConfig = DecodingConfig()) -> int:
    """Interactive loop: each user turn extends the conversation history."""
    rounds: List[Round] = []
    out.write("surgical assistant ready; /reset clears history, /quit exits\n")
    for line in inp:
        line = line.strip()
        if not line:
            continue
        if line == "/quit":
            break
        if line == "/reset":
            rounds = []
            out.write("history cleared\n")
            continue
        rounds.append(Round(line, ""))
        record = ConversationRecord("chat", rounds)
        reply = respond_in_conversation(state, visual, record, len(rounds), decoding)
        rounds[-1] = Round(line, reply.text or "(no answer)")
        out.write(f"assistant: {reply.text}\n")
    return 0


def cmd_chat(args) -> int:
    state = load_checkpoint(args.checkpoint)
    h, w = state.encoder.config.image_size
    visual = np.zeros((h, w, state.encoder.config.channels), dtype=np.float32)
    if args.visual:
        try:
            arr = np.load(args.visual)
            visual = VideoTensor(arr) if arr.ndim == 4 else arr
        except Exception as e:
            print(f"could not decode visual {args.visual}: {e}; continuing without visual")
    return chat_repl(state, visual)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surgvla")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("generate-data", help="expand captions into instruction data")
    p.add_argument("--captions", required=True)
    p.add_argument("--tasks", default="conv,detail,reason")
    p.add_argument("--backend", choices=["mock", "live"], default="mock")
    p.add_argument("--base-url", default="https://api.openai.com/v1")
    p.add_argument("--model", default="gpt-3.5-turbo")
    p.add_argument("--cache", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("ingest", help="load a surgical VQA dataset layout")
    p.add_argument("--dataset", choices=["cholec80", "endovis18", "psiava"], required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="run one training stage on the synthetic corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--stage", choices=["align", "instruct"], required=True)
    p.add_argument("--corpus", default=None, help="instruction corpus JSONL (instruct stage)")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="judge + VQA evaluation on the synthetic set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--judge", choices=["mock", "live"], default="mock")
    p.add_argument("--dims", default="conv,detail,reason")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-new-tokens", type=int, default=8)
    p.add_argument("--name", default="surgvla-toy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render stored reports as text tables")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("chat", help="interactive multi-round demo")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--visual", default=None, help=".npy image (HxWxC) or video (TxHxWxC)")
    p.set_defaults(func=cmd_chat)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        return args.func(args)
    except SurgvlaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
