"""Tests for the JSONL run logger."""

import numpy as np

from sinc_speaker.errors import NonFiniteError
from sinc_speaker.logger import NullLogger, RunLogger


def test_disabled_logger_writes_nothing(tmp_path):
    logger = RunLogger(tmp_path / "run", enabled=False)
    logger.start_run("train")
    logger.log_warning("short_utterance", "excluded")
    assert not (tmp_path / "run").exists()
    assert logger.events == []


def test_events_round_trip(tmp_path):
    logger = RunLogger(tmp_path)
    logger.start_run("eval", {"config_fingerprint": "abc"})
    logger.log_warning("identification_tie", "tie for probe 'x.wav'", {"predicted": "a"})
    logger.log_checkpoint(tmp_path / "epoch_001.ckpt", epoch=1, batch=9)
    logger.end_run()

    events = RunLogger.read_events(tmp_path)
    assert [e["event_type"] for e in events] == ["run_start", "warning", "checkpoint", "run_end"]
    assert {e["run_id"] for e in events} == {logger.run_id}
    assert events[0]["metadata"] == {"config_fingerprint": "abc"}
    assert events[1]["kind"] == "identification_tie"
    assert events[2]["path"].endswith("epoch_001.ckpt")
    assert events[3]["duration_seconds"] >= 0.0


def test_numpy_values_serialize(tmp_path):
    logger = RunLogger(tmp_path)
    logger.log_batch({"batch": np.int64(3), "loss": np.float64(0.25), "grad": np.array([1.0, 2.0])})
    (event,) = RunLogger.read_events(tmp_path)
    assert event["batch"] == 3
    assert event["loss"] == 0.25
    assert event["grad"] == [1.0, 2.0]


def test_error_includes_traceback(tmp_path):
    logger = RunLogger(tmp_path)
    try:
        raise NonFiniteError("loss", batch_index=4)
    except NonFiniteError as e:
        logger.log_error(e)
    (event,) = RunLogger.read_events(tmp_path)
    assert event["error_type"] == "NonFiniteError"
    assert "batch 4" in event["message"]
    assert "Traceback" in event["traceback"]


def test_read_events_without_log(tmp_path):
    assert RunLogger.read_events(tmp_path) == []


def test_null_logger():
    logger = NullLogger()
    logger.log_evaluation({"cer_percent": 0.0})
    assert not logger.enabled
    assert logger.log_file is None
