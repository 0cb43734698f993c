"""``interlens`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 input error, 4 backend error.
Each subcommand loads and validates the config before reading any input.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Any

import click

from . import __version__
from .align import align_transcripts
from .backend import make_backend
from .bookctx import BookContext, build_book_context
from .config import PipelineConfig, load_config
from .datamodel import serialize_transcript
from .errors import InputError, InterlensError
from .evaluation import STRATEGIES, EvalReport, aggregate_runs, evaluate_sessions
from .experts import run_detection
from .knowledge import KnowledgeBase, default_knowledge_base, dump_kb, load_kb
from .pipeline import (
    dumps,
    load_gold,
    load_manifest,
    load_training_corpus,
    load_transcript,
    pair_record,
    read_input,
    read_predictions,
    run_end_to_end,
    write_atomic,
)
from .refine import refine_loop
from .scanner import candidate_record, scan_candidates

logger = logging.getLogger("interlens")


class JsonFormatter(logging.Formatter):
    """One JSON object per log line."""

    def format(self, record: logging.LogRecord) -> str:
        doc = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        if record.exc_info:
            doc["exc"] = self.formatException(record.exc_info)
        return json.dumps(doc, sort_keys=True)


def setup_logging(level: str, as_json: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if as_json else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("interlens")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


def _config(ctx: click.Context, **overrides: Any) -> PipelineConfig:
    cfg = load_config(ctx.obj.get("config"))
    return cfg.replace(**overrides) if overrides else cfg


def _kb(path: str | None, cfg: PipelineConfig) -> KnowledgeBase:
    if path is None:
        return default_knowledge_base(cfg.detection_params())
    return load_kb(path)


def _book_ctx(path: str) -> BookContext:
    try:
        return BookContext.from_dict(json.loads(read_input(Path(path))))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: not a book-context document ({exc})") from exc


@click.group()
@click.version_option(__version__)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="INI config file.")
@click.option("--log-level", default="warning", type=click.Choice(["debug", "info", "warning", "error"]))
@click.option("--log-json", is_flag=True, help="Emit log records as JSON lines.")
@click.pass_context
def cli(ctx: click.Context, config_path: str | None, log_level: str, log_json: bool) -> None:
    """Detect caregiver intervention strategies in shared book reading transcripts."""
    setup_logging(log_level, log_json)
    ctx.ensure_object(dict)
    ctx.obj["config"] = config_path


@cli.command()
@click.option("--primary", required=True, help="Primary perception transcript (.jsonl).")
@click.option("--asr", required=True, help="Secondary ASR transcript (.jsonl).")
@click.option("--out", required=True, help="Merged transcript output (.jsonl).")
@click.option("--pairs", default=None, help="Optional alignment pair report (.json).")
@click.pass_context
def align(ctx: click.Context, primary: str, asr: str, out: str, pairs: str | None) -> None:
    """Merge ASR timestamps into the primary transcript."""
    cfg = _config(ctx)
    backend = make_backend(cfg.backend_config())
    merged, matched = align_transcripts(load_transcript(primary), load_transcript(asr), backend.embed, cfg.align_config())
    write_atomic(Path(out), serialize_transcript(merged))
    if pairs:
        write_atomic(Path(pairs), dumps([pair_record(p) for p in matched]))
    n_sub = sum(p.substituted for p in matched)
    click.echo(f"substituted {n_sub} of {len(merged.caregiver_speech())} caregiver utterances")


@cli.command()
@click.option("--in", "in_path", required=True, help="Transcript (.jsonl).")
@click.option("--out", required=True, help="Book-context output (.json).")
@click.pass_context
def bookctx(ctx: click.Context, in_path: str, out: str) -> None:
    """Mine sentence frames and target words from a transcript."""
    cfg = _config(ctx)
    judge = make_backend(cfg.backend_config()) if cfg.judge else None
    result = build_book_context(load_transcript(in_path), judge, stopwords=cfg.stopwords())
    write_atomic(Path(out), dumps(result.to_dict()))
    click.echo(f"{len(result.frames)} frames, {len(result.targets)} target words")


@cli.command()
@click.option("--in", "in_path", required=True, help="Transcript (.jsonl).")
@click.option("--bookctx", "bookctx_path", default=None, help="Book context (.json); mined on the fly if omitted.")
@click.option("--kb", "kb_path", default=None, help="Knowledge base (.json) supplying scan thresholds.")
@click.option("--out", required=True, help="Candidate output (.json).")
@click.pass_context
def scan(ctx: click.Context, in_path: str, bookctx_path: str | None, kb_path: str | None, out: str) -> None:
    """List candidate intervention loops and attempts."""
    cfg = _config(ctx)
    kb = _kb(kb_path, cfg)
    transcript = load_transcript(in_path)
    book = _book_ctx(bookctx_path) if bookctx_path else build_book_context(transcript, stopwords=cfg.stopwords())
    cands = scan_candidates(transcript, book, kb.scan_config())
    write_atomic(Path(out), dumps([candidate_record(c) for c in cands]))
    click.echo(f"{len(cands)} candidates")


@cli.command()
@click.option("--in", "in_path", default=None, help="Single transcript (.jsonl).")
@click.option("--asr", default=None, help="ASR transcript to merge (single-transcript mode).")
@click.option("--gold", default=None, help="Gold annotations (single-transcript mode).")
@click.option("--manifest", default=None, help="Session manifest (.json).")
@click.option("--kb", "kb_path", default=None, help="Knowledge base (.json); defaults to the built-in v1 rules.")
@click.option("--out", default=None, help="Predictions file (single-transcript mode) or output directory (manifest mode).")
@click.option("--runs", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=None, type=int, help="Overrides the config seed.")
@click.option("--workers", default=None, type=click.IntRange(min=1))
@click.option("--stochastic", is_flag=True, help="Seeded jitter in overlap tie-breaking, so repeated runs can differ.")
@click.option("--keep-intermediates", is_flag=True)
@click.pass_context
def run(
    ctx: click.Context, in_path: str | None, asr: str | None, gold: str | None, manifest: str | None,
    kb_path: str | None, out: str | None, runs: int, seed: int | None, workers: int | None,
    stochastic: bool, keep_intermediates: bool,
) -> None:
    """Run detection on one transcript or on every session of a manifest."""
    cfg = _config(ctx, seed=seed, workers=workers)
    kb = _kb(kb_path, cfg).validate()
    if (in_path is None) == (manifest is None):
        raise click.UsageError("give exactly one of --in or --manifest")
    if out is None:
        raise click.UsageError("--out is required")

    if manifest is not None:
        result = run_end_to_end(
            manifest, cfg, out, kb, runs=runs, stochastic=stochastic, keep_intermediates=keep_intermediates
        )
        n = sum(len(o.predictions) for o in result.outputs[0])
        click.echo(f"{len(result.outputs[0])} sessions, {n} predictions (run 1)")
        if result.reports:
            click.echo(f"{cfg.aggregation} F1 {result.reports[0].headline(cfg.aggregation).f1:.4f}")
        return

    transcript = load_transcript(in_path)
    golds = load_gold(gold)[0] if gold else None
    backend = make_backend(cfg.backend_config())
    if asr:
        transcript, _ = align_transcripts(transcript, load_transcript(asr), backend.embed, cfg.align_config())
    judge = backend if cfg.judge else None
    book = build_book_context(transcript, judge, stopwords=cfg.stopwords())
    preds = run_detection(transcript, book, kb, judge=judge)
    write_atomic(
        Path(out),
        dumps({"session_id": transcript.session_id, "predictions": [p.to_record() for p in preds]}),
    )
    click.echo(f"{len(preds)} predictions")
    if golds is not None:
        report = evaluate_sessions([(golds, preds)], cfg.tol)
        click.echo(f"{cfg.aggregation} F1 {report.headline(cfg.aggregation).f1:.4f}")


@cli.command(name="eval")
@click.option("--gold", default=None, help="Gold annotations (.json) for a single session.")
@click.option("--manifest", default=None, help="Manifest whose sessions carry gold files.")
@click.option("--pred", default=None, help="Predictions file.")
@click.option("--runs", "runs_dir", default=None, help="Directory of prediction files, one per run (e.g. a multi-run `run` output).")
@click.option("--tol", default=None, type=float, help="Boundary tolerance in seconds.")
@click.option("--out", required=True, help="Report output (.json).")
@click.pass_context
def eval_cmd(
    ctx: click.Context, gold: str | None, manifest: str | None, pred: str | None, runs_dir: str | None,
    tol: float | None, out: str,
) -> None:
    """Score predictions against gold annotations."""
    cfg = _config(ctx, tol=tol)
    if (gold is None) == (manifest is None):
        raise click.UsageError("give exactly one of --gold or --manifest")
    if (pred is None) == (runs_dir is None):
        raise click.UsageError("give exactly one of --pred or --runs")

    if gold is not None:
        golds = {None: load_gold(gold)[0]}
    else:
        golds = {}
        for spec in load_manifest(manifest):
            if spec.gold is None:
                raise InputError(f"session {spec.session_id!r} has no gold file")
            golds[spec.session_id] = load_gold(spec.gold)[0]

    def score(pred_path: Path) -> EvalReport:
        preds = read_predictions(pred_path)
        if None in golds:
            if len(preds) != 1:
                raise InputError(f"{pred_path}: single-session gold needs exactly one prediction set")
            return evaluate_sessions([(golds[None], next(iter(preds.values())))], cfg.tol)
        missing = set(golds) - set(preds)
        if missing:
            raise InputError(f"{pred_path}: no predictions for sessions {sorted(missing)}")
        return evaluate_sessions([(golds[sid], preds[sid]) for sid in sorted(golds)], cfg.tol)

    if pred is not None:
        report = score(Path(pred))
        write_atomic(Path(out), dumps(report.to_dict()))
        click.echo(render_report(report, cfg.aggregation))
        return
    # a `run` output dir also holds report files, so prefer the prediction files when present
    files = sorted(Path(runs_dir).glob("predictions*.json")) or sorted(Path(runs_dir).glob("*.json"))
    files.sort(key=lambda f: (len(f.name), f.name))
    if not files:
        raise InputError(f"no prediction files in {runs_dir}")
    reports = [score(f) for f in files]
    agg = aggregate_runs(reports)
    write_atomic(Path(out), dumps({"aggregate": agg.to_dict(), "headline": cfg.aggregation,
                                   "runs": [r.to_dict() for r in reports]}))
    click.echo(render_aggregate(agg.to_dict(), cfg.aggregation))


@cli.command()
@click.option("--train", required=True, help="Training manifest; every session needs gold.")
@click.option("--kb", "kb_path", default=None, help="Starting knowledge base; defaults to the built-in v1 rules.")
@click.option("--out", required=True, help="Refined knowledge base output (.json).")
@click.option("--history", default=None, help="Refinement history output (.json).")
@click.pass_context
def refine(ctx: click.Context, train: str, kb_path: str | None, out: str, history: str | None) -> None:
    """Hill-climb the rule set on a training corpus."""
    cfg = _config(ctx)
    kb0 = _kb(kb_path, cfg).validate()
    corpus = load_training_corpus(train, cfg)
    best, hist = refine_loop(corpus, kb0, patience=cfg.patience, max_iters=cfg.max_iters, tol=cfg.tol, mode=cfg.aggregation)
    write_atomic(Path(out), dump_kb(best).encode("utf-8"))
    if history:
        write_atomic(Path(history), dumps(hist.to_dict()))
    click.echo(f"train F1 {hist.initial_f1:.4f} -> {hist.best_f1:.4f} (version {best.version}, {hist.n_iterations} iterations)")


@cli.command()
@click.option("--out", required=True, help="Knowledge base output (.json).")
@click.pass_context
def kb(ctx: click.Context, out: str) -> None:
    """Write the built-in rule set, with thresholds from the config."""
    cfg = _config(ctx)
    write_atomic(Path(out), dump_kb(default_knowledge_base(cfg.detection_params())).encode("utf-8"))


@cli.command()
@click.option("--in", "in_path", required=True, help="Report (.json) from eval or run.")
@click.pass_context
def report(ctx: click.Context, in_path: str) -> None:
    """Print a report as an aligned text table."""
    cfg = _config(ctx)
    try:
        doc = json.loads(read_input(Path(in_path)))
    except json.JSONDecodeError as exc:
        raise InputError(f"{in_path}: not valid JSON ({exc})") from exc
    try:
        if "aggregate" in doc:
            click.echo(render_aggregate(doc["aggregate"], doc.get("headline", cfg.aggregation)))
        else:
            click.echo(render_report(EvalReport.from_dict(doc), cfg.aggregation))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{in_path}: not a report document ({exc})") from exc


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))  # noqa: E731
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule, *(fmt(r) for r in rows)])


def render_report(rep: EvalReport, headline: str = "micro") -> str:
    """Overall row first, then one row per strategy; percentages with two decimals."""
    pct = lambda v: f"{100 * v:.2f}"  # noqa: E731
    head = rep.headline(headline)
    rows = [[f"Overall ({headline})", pct(head.precision), pct(head.recall), pct(head.f1), "", "", ""]]
    other = "macro" if headline == "micro" else "micro"
    alt = rep.headline(other)
    rows.append([f"Overall ({other})", pct(alt.precision), pct(alt.recall), pct(alt.f1), "", "", ""])
    for s in STRATEGIES:
        m = rep.per_strategy[s]
        rows.append([s.display, pct(m.precision), pct(m.recall), pct(m.f1), str(m.tp), str(m.fp), str(m.fn)])
    return _table(["Strategy", "Precision", "Recall", "F1", "TP", "FP", "FN"], rows)


def render_aggregate(agg: dict[str, Any], headline: str = "micro") -> str:
    mean, std = agg["mean"], agg["std"]
    cell = lambda key: f"{100 * mean[key]:.2f} ± {100 * std[key]:.2f}"  # noqa: E731
    rows = [[f"Overall ({headline})", *(cell(f"{headline}.{m}") for m in ("precision", "recall", "f1"))]]
    for s in STRATEGIES:
        rows.append([s.display, *(cell(f"{s.value}.{m}") for m in ("precision", "recall", "f1"))])
    return f"{agg['n_runs']} runs\n" + _table(["Strategy", "Precision", "Recall", "F1"], rows)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="interlens", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except InterlensError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except ValueError as exc:
        # stray validation errors from constructors count as input problems
        click.echo(f"error: {exc}", err=True)
        return InputError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
