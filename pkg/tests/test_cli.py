import io
import json
import os

import pytest

from surgvla.cli import chat_repl, main, read_flat_config
from surgvla.errors import SurgvlaError
from surgvla.evaluation import DecodingConfig


def write_lines(path, lines):
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


@pytest.fixture()
def captions_file(tmp_path):
    path = str(tmp_path / "captions.jsonl")
    rows = [
        {"sample_id": f"v{i}", "caption": f"phase {i} with tool {i} in use"}
        for i in range(3)
    ]
    write_lines(path, [json.dumps(r) for r in rows])
    return path


@pytest.fixture()
def train_config(tmp_path):
    path = str(tmp_path / "train.cfg")
    write_lines(path, [
        "# toy-scale overrides",
        "learning_rate = 0.01",
        "epochs = 1",
        "batch_size = 4",
        "seed = 0",
        "max_steps = 2",
    ])
    return path


@pytest.fixture()
def trained_run(tmp_path, train_config):
    out = str(tmp_path / "run-align")
    code = main(["train", "--stage", "align", "--config", train_config, "--out", out])
    assert code == 0
    return out


class TestUsage:
    def test_unknown_subcommand_exits_2(self):
        assert main(["frobnicate"]) == 2

    def test_missing_required_argument_exits_2(self):
        assert main(["train", "--stage", "align"]) == 2

    def test_help_exits_0(self):
        assert main(["--help"]) == 0

    def test_runtime_failure_exits_1(self, tmp_path, capsys):
        code = main(["ingest", "--dataset", "cholec80",
                     "--root", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestFlatConfig:
    def test_parses_known_keys(self, train_config):
        cfg = read_flat_config(train_config)
        assert cfg["learning_rate"] == "0.01"
        assert cfg["max_steps"] == "2"

    def test_unknown_key_rejected_with_line_number(self, tmp_path):
        path = str(tmp_path / "bad.cfg")
        write_lines(path, ["epochs = 1", "warmup = 5"])
        with pytest.raises(SurgvlaError, match="line 2.*'warmup'"):
            read_flat_config(path)

    def test_missing_equals_rejected(self, tmp_path):
        path = str(tmp_path / "bad.cfg")
        write_lines(path, ["epochs 1"])
        with pytest.raises(SurgvlaError, match="key=value"):
            read_flat_config(path)

    def test_comments_and_blanks_ignored(self, tmp_path):
        path = str(tmp_path / "c.cfg")
        write_lines(path, ["# header", "", "seed = 3"])
        assert read_flat_config(path) == {"seed": "3"}


class TestGenerateData:
    def test_mock_backend_writes_corpus_and_stats(self, tmp_path, captions_file, capsys):
        out = str(tmp_path / "corpus.jsonl")
        code = main(["generate-data", "--captions", captions_file,
                     "--backend", "mock", "--out", out])
        assert code == 0
        records = [json.loads(l) for l in open(out)]
        assert len(records) == 9  # 3 captions x 3 task kinds
        kinds = {r["task_kind"] for r in records}
        assert kinds == {"conversation", "detail_description", "complex_reasoning"}
        stats = json.load(open(out + ".stats.json"))
        assert stats["total"] == 9
        assert "wrote 9 records" in capsys.readouterr().out

    def test_task_aliases_resolved(self, tmp_path, captions_file):
        out = str(tmp_path / "corpus.jsonl")
        assert main(["generate-data", "--captions", captions_file,
                     "--tasks", "conv", "--out", out]) == 0
        records = [json.loads(l) for l in open(out)]
        assert all(r["task_kind"] == "conversation" for r in records)


class TestIngest:
    def test_psiava_fixture(self, tmp_path, capsys):
        root = tmp_path / "psiava"
        os.makedirs(root / "qa")
        (root / "vocab.txt").write_text("\n".join(f"c{i}" for i in range(35)) + "\n")
        for split, n in (("train", 2), ("test", 1)):
            write_lines(str(root / "qa" / f"{split}.jsonl"), [
                json.dumps({"image": f"{i}.png", "question": "q", "answer": f"c{i}"})
                for i in range(n)
            ])
        out = str(tmp_path / "ingested")
        assert main(["ingest", "--dataset", "psiava", "--root", str(root),
                     "--out", out]) == 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert manifest["total"] == 3
        assert manifest["total_discrepancy"] == 3 - 10291
        records = [json.loads(l) for l in open(os.path.join(out, "records.jsonl"))]
        assert len(records) == 3
        assert "differs from the published total" in capsys.readouterr().out


class TestTrain:
    def test_align_smoke_run(self, trained_run):
        run_config = json.load(open(os.path.join(trained_run, "run_config.json")))
        assert run_config["subcommand"] == "train"
        assert run_config["surgvla_version"]
        assert run_config["config"]["learning_rate"] == 0.01
        metrics = [json.loads(l) for l in open(os.path.join(trained_run, "metrics.jsonl"))]
        assert len(metrics) == 2  # max_steps cap
        assert all(m["stage"] == "align" for m in metrics)
        assert os.path.isdir(os.path.join(trained_run, "checkpoint-final"))

    def test_instruct_smoke_run(self, tmp_path, train_config):
        out = str(tmp_path / "run-instruct")
        code = main(["train", "--stage", "instruct", "--config", train_config,
                     "--out", out])
        assert code == 0
        metrics = [json.loads(l) for l in open(os.path.join(out, "metrics.jsonl"))]
        assert metrics and all(m["stage"] == "instruct" for m in metrics)

    def test_resume_from_checkpoint(self, tmp_path, train_config, trained_run):
        out = str(tmp_path / "run-resumed")
        code = main(["train", "--stage", "align", "--config", train_config,
                     "--resume", os.path.join(trained_run, "checkpoint-final"),
                     "--out", out])
        assert code == 0


class TestEvaluate:
    def test_writes_report_and_verdicts(self, tmp_path, trained_run, capsys):
        out = str(tmp_path / "eval")
        code = main(["evaluate", "--checkpoint",
                     os.path.join(trained_run, "checkpoint-final"),
                     "--out", out, "--max-new-tokens", "4"])
        assert code == 0
        report = json.load(open(os.path.join(out, "report.json")))
        assert report["model_name"] == "surgvla-toy"
        assert "synthetic" in report["vqa_accuracies"]
        assert os.path.exists(os.path.join(out, "verdicts.jsonl"))
        assert "report.json" in capsys.readouterr().out

    def test_live_judge_not_wired(self, tmp_path, trained_run):
        code = main(["evaluate", "--checkpoint",
                     os.path.join(trained_run, "checkpoint-final"),
                     "--judge", "live", "--out", str(tmp_path / "x")])
        assert code == 1


class TestReport:
    def test_renders_tables_and_notes(self, tmp_path, trained_run, capsys):
        out = str(tmp_path / "eval")
        main(["evaluate", "--checkpoint", os.path.join(trained_run, "checkpoint-final"),
              "--out", out, "--max-new-tokens", "4"])
        capsys.readouterr()
        assert main(["report", "--run", out]) == 0
        text = capsys.readouterr().out
        assert "Methods" in text
        assert "Note:" in text

    def test_with_ablation_file(self, tmp_path, trained_run, capsys):
        out = str(tmp_path / "eval")
        main(["evaluate", "--checkpoint", os.path.join(trained_run, "checkpoint-final"),
              "--out", out, "--max-new-tokens", "4"])
        with open(os.path.join(out, "ablation.json"), "w") as f:
            json.dump({
                "video_only": {"conversation": {"accuracy": 40.0, "score": 3.0, "n": 2}},
                "joint": {"conversation": {"accuracy": 50.0, "score": 3.5, "n": 2}},
            }, f)
        capsys.readouterr()
        assert main(["report", "--run", out]) == 0
        text = capsys.readouterr().out
        assert "Delta Acc." in text and "+10.0" in text

    def test_missing_report_exits_1(self, tmp_path, capsys):
        assert main(["report", "--run", str(tmp_path)]) == 1
        assert "no report.json" in capsys.readouterr().err


class TestChat:
    def _visual(self, toy_state):
        import numpy as np
        h, w = toy_state.encoder.config.image_size
        return np.zeros((h, w, 3), dtype="float32")

    def test_scripted_session_structure(self, toy_state):
        out = io.StringIO()
        code = chat_repl(
            toy_state, self._visual(toy_state),
            inp=io.StringIO("what phase is this\n/quit\n"), out=out,
            decoding=DecodingConfig(max_new_tokens=4),
        )
        assert code == 0
        lines = out.getvalue().splitlines()
        assert lines[0].startswith("surgical assistant ready")
        assert lines[1].startswith("assistant:")

    def test_reset_clears_history(self, toy_state):
        out = io.StringIO()
        chat_repl(
            toy_state, self._visual(toy_state),
            inp=io.StringIO("what phase\n/reset\nwhat phase\n/quit\n"), out=out,
            decoding=DecodingConfig(max_new_tokens=4),
        )
        text = out.getvalue()
        assert "history cleared" in text
        replies = [l for l in text.splitlines() if l.startswith("assistant:")]
        assert len(replies) == 2
        # the same question in a fresh history yields the same reply
        assert replies[0] == replies[1]

    def test_repeat_runs_identical(self, toy_state):
        script = "what phase is this\nwhich tool is used\n/quit\n"
        outs = []
        for _ in range(2):
            out = io.StringIO()
            chat_repl(toy_state, self._visual(toy_state),
                      inp=io.StringIO(script), out=out,
                      decoding=DecodingConfig(max_new_tokens=4))
            outs.append(out.getvalue())
        assert outs[0] == outs[1]
