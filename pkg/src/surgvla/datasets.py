"""Surgical VQA dataset ingestion into a common record schema, plus a
procedurally generated miniature corpus for desk-scale runs.

Directory layouts are defined by this package (the upstream releases ship no
canonical file format) and documented per loader. Loaders validate and ingest
only; they never download data.

Cholec80-VQA layout::

    root/qa/video01.jsonl ... video80.jsonl   # {"second": int, "question": str, "answer": str}
    root/frames/video01/000000.png ...        # optional 1-fps frames, named by second

EndoVis-18-VQA layout::

    root/<split>/qa/<seq>.jsonl               # {"image": str, "question": str, "answer": str}

PSI-AVA-VQA layout::

    root/vocab.txt                            # one answer class per line (35 total)
    root/qa/<split>.jsonl                     # {"image": str, "question": str, "answer": str}
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .contrastive import VisualSample
from .datagen import SourceCaption
from .encoding import VideoTensor
from .errors import IngestError, InvalidInputError

EXPECTED_TOTALS = {"cholec80": 97251, "endovis18": 11783, "psiava": 10291}
PSIAVA_VOCAB_SIZE = 35
CHOLEC80_FPS = 1.0
CHOLEC80_TEST_VIDEOS = set(range(71, 81))


@dataclass
class VQARecord:
    sample_id: str
    visual_path: str
    question: str
    answer: str
    dataset: str
    split: str
    answer_class: Optional[int] = None


@dataclass
class DatasetManifest:
    dataset: str
    counts: Dict[str, int]
    fps_rule: Optional[float] = None
    class_vocabulary: Optional[List[str]] = None
    expected_total: Optional[int] = None
    raw_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def total_discrepancy(self) -> Optional[int]:
        """Difference against the published pair count, when one is known."""
        if self.expected_total is None:
            return None
        return self.total - self.expected_total

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "counts": self.counts,
            "total": self.total,
            "fps_rule": self.fps_rule,
            "class_vocabulary": self.class_vocabulary,
            "expected_total": self.expected_total,
            "total_discrepancy": self.total_discrepancy,
            "raw_counts": self.raw_counts,
        }


def _read_jsonl(path: str) -> List[dict]:
    rows = []
    with open(path) as f:
        for i, line in enumerate(f):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise IngestError(f"{path} line {i + 1}: invalid JSON ({e})")
    return rows


def load_cholec80_vqa(root: str) -> Tuple[List[VQARecord], DatasetManifest]:
    """Load Cholec80-VQA: 1-fps frame alignment, videos 71-80 held out as test."""
    qa_dir = os.path.join(root, "qa")
    if not os.path.isdir(qa_dir):
        raise IngestError(f"Cholec80-VQA root {root} has no qa/ directory")
    records: List[VQARecord] = []
    counts = {"train": 0, "test": 0}
    for fname in sorted(os.listdir(qa_dir)):
        m = re.fullmatch(r"video(\d+)\.jsonl", fname)
        if not m:
            raise IngestError(f"unexpected file {fname} in {qa_dir}; expected videoNN.jsonl")
        vid = int(m.group(1))
        split = "test" if vid in CHOLEC80_TEST_VIDEOS else "train"
        frames_dir = os.path.join(root, "frames", f"video{m.group(1)}")
        for k, row in enumerate(_read_jsonl(os.path.join(qa_dir, fname))):
            second = int(row["second"])  # 1-fps rule: frame at each integer second
            frame_name = f"{second:06d}.png"
            frame_path = os.path.join(frames_dir, frame_name)
            if os.path.isdir(frames_dir) and not os.path.exists(frame_path):
                raise IngestError(
                    f"video{m.group(1)} annotation at second {second} has no frame {frame_name}"
                )
            records.append(VQARecord(
                sample_id=f"cholec80/video{m.group(1)}/{second}/{k}",
                visual_path=frame_path,
                question=row["question"],
                answer=row["answer"],
                dataset="cholec80",
                split=split,
            ))
            counts[split] += 1
    manifest = DatasetManifest(
        dataset="cholec80", counts=counts, fps_rule=CHOLEC80_FPS,
        expected_total=EXPECTED_TOTALS["cholec80"],
    )
    return records, manifest


def load_endovis18_vqa(root: str) -> Tuple[List[VQARecord], DatasetManifest]:
    """Load EndoVis-18-VQA using its original train/test split; images may carry
    multiple annotations."""
    records: List[VQARecord] = []
    counts = {}
    images = set()
    for split in ("train", "test"):
        qa_dir = os.path.join(root, split, "qa")
        if not os.path.isdir(qa_dir):
            raise IngestError(f"EndoVis-18-VQA root {root} has no {split}/qa directory")
        counts[split] = 0
        for fname in sorted(os.listdir(qa_dir)):
            if not fname.endswith(".jsonl"):
                raise IngestError(f"unexpected file {fname} in {qa_dir}")
            seq = fname[: -len(".jsonl")]
            for k, row in enumerate(_read_jsonl(os.path.join(qa_dir, fname))):
                images.add(row["image"])
                records.append(VQARecord(
                    sample_id=f"endovis18/{split}/{seq}/{k}",
                    visual_path=os.path.join(root, split, row["image"]),
                    question=row["question"],
                    answer=row["answer"],
                    dataset="endovis18",
                    split=split,
                ))
                counts[split] += 1
    manifest = DatasetManifest(
        dataset="endovis18", counts=counts,
        expected_total=EXPECTED_TOTALS["endovis18"],
        raw_counts={"images": len(images), "pairs": sum(counts.values())},
    )
    return records, manifest


def load_psiava_vqa(root: str) -> Tuple[List[VQARecord], DatasetManifest]:
    """Load PSI-AVA-VQA; every answer must map into the closed 35-class vocabulary."""
    vocab_path = os.path.join(root, "vocab.txt")
    if not os.path.exists(vocab_path):
        raise IngestError(f"PSI-AVA-VQA root {root} has no vocab.txt")
    with open(vocab_path) as f:
        vocab = [line.strip() for line in f if line.strip()]
    if len(vocab) != len(set(vocab)):
        raise IngestError("PSI-AVA-VQA vocabulary has duplicate labels")
    index = {label: i for i, label in enumerate(vocab)}
    records: List[VQARecord] = []
    counts = {}
    for split in ("train", "test"):
        path = os.path.join(root, "qa", f"{split}.jsonl")
        if not os.path.exists(path):
            raise IngestError(f"PSI-AVA-VQA root {root} has no qa/{split}.jsonl")
        counts[split] = 0
        for k, row in enumerate(_read_jsonl(path)):
            answer = row["answer"]
            if answer not in index:
                raise IngestError(f"answer {answer!r} not in the PSI-AVA vocabulary")
            records.append(VQARecord(
                sample_id=f"psiava/{split}/{k}",
                visual_path=os.path.join(root, row["image"]),
                question=row["question"],
                answer=answer,
                dataset="psiava",
                split=split,
                answer_class=index[answer],
            ))
            counts[split] += 1
    manifest = DatasetManifest(
        dataset="psiava", counts=counts, class_vocabulary=vocab,
        expected_total=EXPECTED_TOTALS["psiava"],
    )
    return records, manifest


# --- synthetic miniature corpus -------------------------------------------

PHASES = ["preparation", "dissection", "clipping", "irrigation"]
TOOLS = ["grasper", "scissors", "hook", "clipper"]
_PHASE_COLORS = {
    "preparation": (0.9, 0.2, 0.2),
    "dissection": (0.2, 0.9, 0.2),
    "clipping": (0.2, 0.2, 0.9),
    "irrigation": (0.8, 0.8, 0.2),
}


@dataclass
class SyntheticCorpus:
    """Seed-determined miniature stand-in for the gated surgical datasets.

    Every answer is derivable from its caption: the caption names the phase and
    tool, and the Q/A pairs ask exactly for those."""

    videos: Dict[str, VideoTensor]
    visual_samples: List[VisualSample]
    captions: List[SourceCaption]
    vqa_records: List[VQARecord]


def _synthetic_frame(rng: np.random.Generator, phase: str, tool_idx: int,
                     jitter: float, size: int = 8) -> np.ndarray:
    frame = np.empty((size, size, 3), dtype=np.float32)
    frame[:] = _PHASE_COLORS[phase]
    # tool signature: a bright bar whose row encodes the tool identity
    row = 1 + tool_idx
    frame[row, 1:-1, :] = 1.0
    frame += rng.normal(0.0, jitter, frame.shape).astype(np.float32)
    return np.clip(frame, 0.0, 1.0)


def make_synthetic_corpus(
    seed: int = 0,
    sizes: Optional[dict] = None,
) -> SyntheticCorpus:
    """Generate tiny videos with consistent captions and Q/A, fixed by seed.

    ``sizes`` keys: videos (default 4), frames (frames per video, default 8),
    frame_size (default 8), jitter (pixel noise, default 0.02).
    """
    sizes = dict(sizes or {})
    n_videos = int(sizes.get("videos", 4))
    n_frames = int(sizes.get("frames", 8))
    frame_size = int(sizes.get("frame_size", 8))
    jitter = float(sizes.get("jitter", 0.02))
    if n_videos < 1 or n_frames < 1:
        raise InvalidInputError("synthetic corpus sizes must be >= 1")
    rng = np.random.default_rng(seed)
    videos: Dict[str, VideoTensor] = {}
    samples: List[VisualSample] = []
    captions: List[SourceCaption] = []
    vqa: List[VQARecord] = []
    for v in range(n_videos):
        phase = PHASES[v % len(PHASES)]
        tool_idx = int(rng.integers(len(TOOLS)))
        tool = TOOLS[tool_idx]
        frames = np.stack([
            _synthetic_frame(rng, phase, tool_idx, jitter, frame_size)
            for _ in range(n_frames)
        ])
        vid_id = f"synthetic/video{v:02d}"
        video = VideoTensor(frames, fps=1.0)
        videos[vid_id] = video
        caption = f"{phase} phase with {tool} in use"
        captions.append(SourceCaption(vid_id, caption, dataset="synthetic", modality="video"))
        samples.append(VisualSample(vid_id, vid_id, "video", video, caption))
        # one image sample cut from the same video keeps both modalities in the pool
        frame_idx = int(rng.integers(n_frames))
        samples.append(VisualSample(
            f"{vid_id}/frame{frame_idx}", vid_id, "image", frames[frame_idx], caption,
        ))
        split = "test" if v >= max(1, n_videos - max(1, n_videos // 4)) else "train"
        vqa.append(VQARecord(
            sample_id=f"{vid_id}/qa0", visual_path=vid_id,
            question="What is the current phase?", answer=phase,
            dataset="synthetic", split=split,
        ))
        vqa.append(VQARecord(
            sample_id=f"{vid_id}/qa1", visual_path=vid_id,
            question="Which tool is in use?", answer=tool,
            dataset="synthetic", split=split,
        ))
    return SyntheticCorpus(videos, samples, captions, vqa)
