"""Synthetic corpora shared by the refinement and acceptance tests."""

from __future__ import annotations

from interlens.refine import TrainingSession
from interlens.synthetic import make_session

ROTATION = ("td_loop", "mand_loop", "modeling_attempt")


def short_pause_corpus(n_sessions: int = 4, td_pause: float = 2.7) -> list[TrainingSession]:
    """Sessions whose Time Delay pauses sit just under the default 3.0 s threshold.

    Lowering ``td_pause_min`` by one nudge (to 2.5 s) recovers every planted
    Time Delay loop; nothing else in the corpus is misdetected.
    """
    out = []
    for i in range(n_sessions):
        blocks = [ROTATION[(i + k) % 3] for k in range(3)]
        s = make_session(f"r{i + 1:02d}", blocks, seed=10 + i, td_pause=td_pause)
        out.append(TrainingSession(s.session_id, s.transcript, tuple(s.golds)))
    return out
