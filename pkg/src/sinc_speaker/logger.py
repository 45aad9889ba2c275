"""Structured event logging for sinc-speaker runs."""

import json
import traceback as tb
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
from uuid import uuid4


class RunLogger:
    """Appends run events to ``<run dir>/events.jsonl``, one JSON object per line."""

    LOG_FILE = "events.jsonl"

    def __init__(self, run_dir: Optional[Union[str, Path]] = None, enabled: bool = True):
        """Initialize the run logger.

        Args:
            run_dir: Output directory of the run. Required when enabled.
            enabled: Whether logging is enabled. A disabled logger is a no-op.
        """
        self.enabled = enabled and run_dir is not None
        self.run_id = str(uuid4())
        self.run_start = datetime.utcnow().isoformat()
        self.command: Optional[str] = None
        self.events: List[Dict[str, Any]] = []
        self.log_file: Optional[Path] = None
        if self.enabled:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            self.log_file = run_dir / self.LOG_FILE

    def start_run(self, command: str, metadata: Optional[Dict[str, Any]] = None) -> None:
        """Record the start of a command.

        Args:
            command: CLI command name ('train', 'eval', ...).
            metadata: Optional run metadata (paths, config fingerprint).
        """
        if not self.enabled:
            return
        self.command = command
        self._log_event("run_start", command=command, metadata=metadata or {})

    def log_warning(self, kind: str, message: str, context: Optional[Dict[str, Any]] = None) -> None:
        """Log a degenerate-input decision (exclusion, flag, tie).

        Args:
            kind: Short machine-readable label, e.g. 'short_utterance'.
            message: Human-readable description.
            context: Optional details.
        """
        if not self.enabled:
            return
        self._log_event("warning", kind=kind, message=message, context=context or {})

    def log_batch(self, row: Dict[str, Any]) -> None:
        if not self.enabled:
            return
        self._log_event("batch", **row)

    def log_checkpoint(self, path: Union[str, Path], epoch: int, batch: int) -> None:
        if not self.enabled:
            return
        self._log_event("checkpoint", path=str(path), epoch=epoch, batch=batch)

    def log_evaluation(self, report: Dict[str, Any]) -> None:
        if not self.enabled:
            return
        self._log_event("evaluation", report=report)

    def log_error(self, error: BaseException) -> None:
        """Log an exception with its traceback."""
        if not self.enabled:
            return
        self._log_event(
            "error",
            error_type=type(error).__name__,
            message=str(error),
            traceback="".join(tb.format_exception(type(error), error, error.__traceback__)),
        )

    def end_run(self) -> None:
        """Record the end of the command and its duration."""
        if not self.enabled:
            return
        duration = (datetime.utcnow() - datetime.fromisoformat(self.run_start)).total_seconds()
        self._log_event("run_end", duration_seconds=duration)

    def _log_event(self, event_type: str, **fields: Any) -> None:
        event = {
            "event_type": event_type,
            "timestamp": datetime.utcnow().isoformat(),
            "run_id": self.run_id,
            **fields,
        }
        self.events.append(event)
        try:
            with open(self.log_file, "a", encoding="utf-8") as f:
                f.write(json.dumps(event, default=_json_default) + "\n")
        except IOError:
            # keep the event in memory only
            pass

    @staticmethod
    def read_events(run_dir: Union[str, Path]) -> List[Dict[str, Any]]:
        """Load every event of a run directory (empty list if none were logged)."""
        log_file = Path(run_dir) / RunLogger.LOG_FILE
        if not log_file.exists():
            return []
        with open(log_file, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]


def _json_default(value: Any) -> Any:
    # numpy scalars and arrays
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


class NullLogger(RunLogger):
    """A logger that never writes."""

    def __init__(self):
        super().__init__(run_dir=None, enabled=False)
