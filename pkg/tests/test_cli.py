from __future__ import annotations

import json
import subprocess
import sys

import pytest

from interlens import __version__
from interlens.cli import main
from interlens.datamodel import serialize_transcript
from interlens.synthetic import asr_twin, balanced_corpus, jitter_primary, write_corpus

from corpora import short_pause_corpus


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    write_corpus(balanced_corpus(3), d)
    return d


def test_version(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_run_manifest_then_eval_and_report(corpus, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--manifest", str(corpus / "manifest.json"), "--out", str(out)]) == 0
    assert "micro F1 1.0000" in capsys.readouterr().out
    rep = tmp_path / "rep.json"
    assert main(["eval", "--manifest", str(corpus / "manifest.json"), "--pred", str(out / "predictions.json"),
                 "--out", str(rep)]) == 0
    text = capsys.readouterr().out
    assert "Overall (micro)" in text and "Time Delay" in text
    assert json.loads(rep.read_text())["aggregate_micro"]["f1"] == 1.0
    assert main(["report", "--in", str(rep)]) == 0
    assert "100.00" in capsys.readouterr().out


def test_multi_run_and_eval_runs_dir(corpus, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--manifest", str(corpus / "manifest.json"), "--out", str(out), "--runs", "3",
                 "--stochastic", "--seed", "5"]) == 0
    runs = tmp_path / "preds"
    runs.mkdir()
    for k in (1, 2, 3):
        (runs / f"p{k}.json").write_bytes((out / f"predictions_run{k}.json").read_bytes())
    capsys.readouterr()
    assert main(["eval", "--manifest", str(corpus / "manifest.json"), "--runs", str(runs), "--out",
                 str(tmp_path / "agg.json")]) == 0
    assert "3 runs" in capsys.readouterr().out
    # the run output dir itself works too: its report files are skipped
    assert main(["eval", "--manifest", str(corpus / "manifest.json"), "--runs", str(out), "--out",
                 str(tmp_path / "agg2.json")]) == 0
    assert (tmp_path / "agg2.json").read_bytes() == (tmp_path / "agg.json").read_bytes()
    assert main(["report", "--in", str(out / "report.json")]) == 0
    assert "±" in capsys.readouterr().out


def test_single_transcript_pipeline(corpus, tmp_path, capsys):
    sess = balanced_corpus(1)[0]
    primary, asr = tmp_path / "p.jsonl", tmp_path / "a.jsonl"
    primary.write_bytes(serialize_transcript(jitter_primary(sess.transcript, seed=1)))
    asr.write_bytes(serialize_transcript(asr_twin(sess.transcript, max_shift=0.0)))
    merged, pairs = tmp_path / "m.jsonl", tmp_path / "pairs.json"
    assert main(["align", "--primary", str(primary), "--asr", str(asr), "--out", str(merged), "--pairs", str(pairs)]) == 0
    assert "substituted" in capsys.readouterr().out
    ctx = tmp_path / "ctx.json"
    assert main(["bookctx", "--in", str(merged), "--out", str(ctx)]) == 0
    kb = tmp_path / "kb.json"
    assert main(["kb", "--out", str(kb)]) == 0
    cands = tmp_path / "c.json"
    assert main(["scan", "--in", str(merged), "--bookctx", str(ctx), "--kb", str(kb), "--out", str(cands)]) == 0
    assert json.loads(cands.read_text())
    preds = tmp_path / "pred.json"
    assert main(["run", "--in", str(primary), "--asr", str(asr), "--gold", str(corpus / "s01_gold.json"),
                 "--out", str(preds)]) == 0
    assert "micro F1 1.0000" in capsys.readouterr().out
    assert main(["eval", "--gold", str(corpus / "s01_gold.json"), "--pred", str(preds), "--out", str(tmp_path / "r.json")]) == 0


def test_refine_command(tmp_path, capsys):
    from interlens.datamodel import serialize_gold

    entries = []
    for s in short_pause_corpus(2):
        (tmp_path / f"{s.session_id}.jsonl").write_bytes(serialize_transcript(s.transcript))
        (tmp_path / f"{s.session_id}_gold.json").write_bytes(serialize_gold(list(s.golds)))
        entries.append({"session_id": s.session_id, "transcript": f"{s.session_id}.jsonl", "gold": f"{s.session_id}_gold.json"})
    (tmp_path / "train.json").write_text(json.dumps({"sessions": entries}))
    out, hist = tmp_path / "kb.json", tmp_path / "hist.json"
    assert main(["refine", "--train", str(tmp_path / "train.json"), "--out", str(out), "--history", str(hist)]) == 0
    assert "version 2" in capsys.readouterr().out
    kb = json.loads(out.read_text())
    assert kb["params"]["td_pause_min"] == 2.5 and kb["changelog"][0]["description"] == "td_pause_min 3.0 → 2.5"
    assert json.loads(hist.read_text())["steps"][0]["accepted"]


def test_exit_codes(corpus, tmp_path, capsys):
    bad_cfg = tmp_path / "bad.ini"
    bad_cfg.write_text("[detection]\ntd_pause = 2\n")
    assert main(["--config", str(bad_cfg), "run", "--manifest", str(corpus / "manifest.json"), "--out", str(tmp_path)]) == 2
    assert main(["run", "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 3
    assert main(["run", "--in", "x", "--manifest", "y", "--out", "z"]) == 2
    assert main(["frobnicate"]) == 2
    bad_kb = tmp_path / "kb.json"
    bad_kb.write_text("{")
    assert main(["run", "--manifest", str(corpus / "manifest.json"), "--kb", str(bad_kb), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "notreport.json").write_text("[1]")
    assert main(["report", "--in", str(tmp_path / "notreport.json")]) == 3
    assert "error:" in capsys.readouterr().err


def test_backend_error_exit_code(tmp_path):
    sess = balanced_corpus(1)[0]
    (tmp_path / "ref.jsonl").write_bytes(serialize_transcript(sess.transcript))
    (tmp_path / "clips.json").write_text(json.dumps({"duration": sess.transcript.duration, "reference": "ref.jsonl"}))
    (tmp_path / "m.json").write_text(json.dumps({"sessions": [{"session_id": "s01", "clips": "clips.json"}]}))
    (tmp_path / "fx").mkdir()
    (tmp_path / "cfg.ini").write_text("[backend]\nkind = replay\nfixture_dir = fx\n")
    code = main(["--config", str(tmp_path / "cfg.ini"), "run", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path / "o")])
    assert code == 4 and not (tmp_path / "o").exists()


def test_json_logging(corpus, tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "interlens.cli", "--log-json", "--log-level", "info", "run", "--manifest",
         str(corpus / "manifest.json"), "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    records = [json.loads(line) for line in proc.stderr.splitlines() if line.strip()]
    assert records and all({"level", "logger", "msg"} <= set(r) for r in records)
