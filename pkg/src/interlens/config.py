"""Pipeline configuration loaded from an INI file.

Every key has a default; a file only needs the values it changes. Unknown
sections or keys are rejected so typos never pass silently. Secrets are not
stored here: the remote backend reads its token from the environment
variable named by ``token_env``.

Example::

    [detection]
    td_pause_min = 2.5

    [backend]
    kind = replay
    fixture_dir = fixtures/
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .align import AlignConfig
from .backend import BackendConfig
from .bookctx import parse_stopwords
from .errors import ConfigError
from .knowledge import DEFAULT_PARAMS

AGGREGATION_MODES = ("macro", "micro")
BACKEND_KINDS = ("mock", "replay", "remote")

# section -> keys accepted in that section
SECTIONS: dict[str, tuple[str, ...]] = {
    "align": ("d_max", "t_max", "search_window"),
    "perception": ("clip_len",),
    "bookctx": ("stopwords_file",),
    "detection": ("turn_merge_gap", "response_gap_max", "reinforce_gap_max", "td_pause_min", "attempt_tail", "slack"),
    "eval": ("tol", "aggregation"),
    "refine": ("patience", "max_iters"),
    "run": ("seed", "workers", "judge"),
    "backend": (
        "kind", "fixture_dir", "record_dir", "base_url", "token_env", "timeout", "retries",
        "model_perceive", "model_embed", "model_judge",
    ),
}

_TIME_KEYS = (
    "d_max", "t_max", "search_window", "clip_len", "tol", "turn_merge_gap", "response_gap_max",
    "reinforce_gap_max", "td_pause_min", "attempt_tail", "slack", "timeout",
)


@dataclass(frozen=True)
class PipelineConfig:
    d_max: float = 0.1
    t_max: float = 1.0
    search_window: float = 5.0
    clip_len: float = 15.0
    stopwords_file: str | None = None
    tol: float = 1.0
    turn_merge_gap: float = 1.0
    response_gap_max: float = 5.0
    reinforce_gap_max: float = 5.0
    td_pause_min: float = 3.0
    attempt_tail: float = 3.0
    slack: float = 2.0
    patience: int = 3
    max_iters: int = 20
    aggregation: str = "micro"
    seed: int = 0
    workers: int = 4
    judge: bool = False
    kind: str = "mock"
    fixture_dir: str | None = None
    record_dir: str | None = None
    base_url: str | None = None
    token_env: str | None = None
    timeout: float = 30.0
    retries: int = 2
    model_perceive: str | None = None
    model_embed: str | None = None
    model_judge: str | None = None
    base_dir: Path = field(default=Path("."), compare=False)

    def __post_init__(self) -> None:
        for key in _TIME_KEYS:
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be > 0, got {getattr(self, key)}")
        if self.aggregation not in AGGREGATION_MODES:
            raise ConfigError(f"aggregation must be one of {AGGREGATION_MODES}, got {self.aggregation!r}")
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if self.kind == "replay" and not self.fixture_dir:
            raise ConfigError("backend kind 'replay' requires fixture_dir")
        if self.kind == "remote" and not self.base_url:
            raise ConfigError("backend kind 'remote' requires base_url")
        if self.patience < 1 or self.max_iters < 1:
            raise ConfigError("patience and max_iters must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.retries < 0:
            raise ConfigError("retries must be >= 0")

    def detection_params(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in DEFAULT_PARAMS}

    def align_config(self) -> AlignConfig:
        return AlignConfig(self.d_max, self.t_max, self.search_window)

    def backend_config(self) -> BackendConfig:
        models = {
            kind: name
            for kind, name in (("perceive_clip", self.model_perceive), ("embed", self.model_embed), ("judge", self.model_judge))
            if name
        }
        return BackendConfig(
            kind=self.kind,
            fixture_dir=self._path(self.fixture_dir),
            record_dir=self._path(self.record_dir),
            base_url=self.base_url,
            token_env=self.token_env,
            timeout=self.timeout,
            retries=self.retries,
            models=models,
        )

    def stopwords(self) -> frozenset[str] | None:
        """Custom stopword list, or None for the built-in one."""
        path = self._path(self.stopwords_file)
        if path is None:
            return None
        try:
            return parse_stopwords(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read stopwords file {path}: {exc}") from exc

    def _path(self, value: str | None) -> str | None:
        if value is None:
            return None
        return str(self.base_dir / value)

    def replace(self, **changes: Any) -> "PipelineConfig":
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        unknown = set(changes) - set(doc)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc.update({k: v for k, v in changes.items() if v is not None})
        return PipelineConfig(**doc)


def _coerce(key: str, raw: str) -> Any:
    ftype = {f.name: f.type for f in fields(PipelineConfig)}[key]
    try:
        if ftype == "float":
            return float(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "bool":
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
    except (ValueError, KeyError):
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return raw.strip() or None


def parse_config(text: str, base_dir: Path | None = None) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__", inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keep key case so typos in case are caught too
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    values: dict[str, Any] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            values[key] = _coerce(key, raw)
    return PipelineConfig(base_dir=base_dir or Path("."), **values)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)
