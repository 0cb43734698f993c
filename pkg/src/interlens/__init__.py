"""Detect caregiver intervention strategies in shared book reading sessions.

The pipeline merges perception and ASR transcripts, mines book context,
scans for intervention candidates, verifies them with strategy experts
driven by a versioned rule set, and scores the result against gold
segments.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .datamodel import (
    ClipWindow,
    GoldSegment,
    PredictedSegment,
    StrategyLabel,
    Transcript,
    TranscriptEvent,
    chunk_session,
    parse_gold,
    parse_transcript,
)
from .evaluation import EvalReport, compute_report, match_segments
from .knowledge import KnowledgeBase, default_knowledge_base
from .pipeline import run_end_to_end

__all__ = [
    "ClipWindow",
    "EvalReport",
    "GoldSegment",
    "KnowledgeBase",
    "PredictedSegment",
    "StrategyLabel",
    "Transcript",
    "TranscriptEvent",
    "__version__",
    "chunk_session",
    "compute_report",
    "default_knowledge_base",
    "match_segments",
    "parse_gold",
    "parse_transcript",
    "run_end_to_end",
]
