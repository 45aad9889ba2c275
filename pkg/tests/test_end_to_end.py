"""Full training runs on the desk-scale synthetic corpora.

These use ``configs/toy.conf`` and take tens of minutes on one core.
"""

from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from sinc_speaker.cli import main
from sinc_speaker.config import ConfigManager
from sinc_speaker.data import MANIFEST_FILE, synth_corpus
from sinc_speaker.evaluation import evaluate_inter, evaluate_intra
from sinc_speaker.training import FINAL_CHECKPOINT, train

pytestmark = pytest.mark.slow

TOY_CONF = Path(__file__).resolve().parent.parent / "configs" / "toy.conf"
TOY_BATCHES = 500


def toy_manager(**overrides) -> ConfigManager:
    manager = ConfigManager()
    manager.load(TOY_CONF)
    manager.apply_overrides(overrides)
    manager.validate()
    return manager


def toy_corpus(root, n_speakers, seed):
    manager = toy_manager()
    split = manager.split_policy()
    return synth_corpus(
        root,
        n_speakers,
        8,
        3.0,
        sample_rate=manager.get("data.sample_rate"),
        seed=seed,
        chunk_ms=manager.get("data.chunk_ms"),
        train_target_s=split["train_target_s"],
        test_target_s=split["test_target_s"],
    )


def toy_train(manifest, loss_kind, batches):
    manager = toy_manager(
        **{"loss.kind": loss_kind, "train.epochs": 1, "train.batches_per_epoch": batches}
    )
    model_config = manager.to_model_config(sample_rate=manifest.sample_rate)
    return train(manifest, model_config, manager.to_train_config())


@pytest.fixture(scope="module")
def toy20(tmp_path_factory):
    return toy_corpus(tmp_path_factory.mktemp("toy20"), 20, seed=7)


@pytest.fixture(scope="module")
def unseen10(tmp_path_factory):
    return toy_corpus(tmp_path_factory.mktemp("unseen10"), 10, seed=99)


@pytest.fixture(scope="module")
def curricular20(toy20):
    return toy_train(toy20, "curricular", TOY_BATCHES)


@pytest.fixture(scope="module")
def softmax20(toy20):
    return toy_train(toy20, "softmax", TOY_BATCHES)


class TestCurricularRun:
    def test_loss_falls_and_t_rises(self, unseen10):
        log = toy_train(unseen10, "curricular", 200).log
        assert len(log) == 200
        losses = np.array([row["loss"] for row in log])
        ts = np.array([row["t"] for row in log])
        assert losses[-10:].mean() < 0.25 * losses[0]
        assert ts[-20:].mean() > ts[:20].mean()


class TestIntraTargets:
    def test_curricular(self, curricular20, toy20):
        report = evaluate_intra(curricular20.weights, toy20).report
        assert report.cer_percent <= 5.0
        assert report.fer_percent <= 25.0

    def test_softmax(self, softmax20, toy20):
        report = evaluate_intra(softmax20.weights, toy20).report
        assert report.cer_percent <= 10.0


class TestInterSmoke:
    def test_unseen_speakers(self, curricular20, unseen10):
        report = evaluate_inter(curricular20.weights, unseen10, enroll_chunks=10).report
        assert report.gallery_size == 10
        assert report.cer_percent <= 30.0


class TestCliRerun:
    def test_eval_reports_are_byte_identical(self, tmp_path):
        runner = CliRunner()
        corpus = tmp_path / "corpus"
        run = tmp_path / "run"
        conf = ["--config", str(TOY_CONF)]
        assert runner.invoke(
            main,
            ["synth", "--speakers", "10", "--utts", "8", "--seconds", "3", "--seed", "7",
             "--out", str(corpus)] + conf,
        ).exit_code == 0
        result = runner.invoke(
            main,
            ["train", "--manifest", str(corpus / MANIFEST_FILE), "--out", str(run),
             "--set", "train.epochs=1", "--set", "train.batches_per_epoch=20"] + conf,
        )
        assert result.exit_code == 0, result.output
        for protocol in ("intra", "inter"):
            reports = []
            for attempt in ("a", "b"):
                out = tmp_path / f"{protocol}_{attempt}"
                result = runner.invoke(
                    main,
                    ["eval", "--protocol", protocol, "--ckpt", str(run / FINAL_CHECKPOINT),
                     "--manifest", str(corpus / MANIFEST_FILE), "--out", str(out)] + conf,
                )
                assert result.exit_code == 0, result.output
                reports.append((out / "report.json").read_bytes())
            assert reports[0] == reports[1]
