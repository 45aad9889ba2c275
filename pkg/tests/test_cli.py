"""End-to-end tests of the command-line interface."""

import json

import pytest
from click.testing import CliRunner

from sinc_speaker import sinc
from sinc_speaker.checkpoint import load_checkpoint, save_checkpoint
from sinc_speaker.cli import main
from sinc_speaker.data import MANIFEST_FILE, DatasetManifest
from sinc_speaker.training import FINAL_CHECKPOINT, LOG_FILE


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def synth_dir(runner, tmp_path, tiny_config_file):
    out = tmp_path / "corpus"
    result = runner.invoke(
        main,
        ["synth", "--speakers", "3", "--utts", "4", "--seconds", "1.0", "--seed", "5",
         "--out", str(out), "--config", str(tiny_config_file)],
    )
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture
def trained_run(runner, synth_dir, tmp_path, tiny_config_file):
    run = tmp_path / "run"
    result = runner.invoke(
        main,
        ["train", "--manifest", str(synth_dir / MANIFEST_FILE), "--out", str(run),
         "--config", str(tiny_config_file), "--loss", "arcface", "--m", "0.2"],
    )
    assert result.exit_code == 0, result.output
    return run


class TestSynth:
    def test_writes_corpus(self, synth_dir):
        manifest = DatasetManifest.load(synth_dir / MANIFEST_FILE)
        assert manifest.speakers == ["spk000", "spk001", "spk002"]
        assert len(manifest.split("train")) == 6
        assert (synth_dir / "config.txt").is_file()

    def test_rerun_is_identical(self, runner, synth_dir, tmp_path, tiny_config_file):
        again = tmp_path / "again"
        result = runner.invoke(
            main,
            ["synth", "--speakers", "3", "--utts", "4", "--seconds", "1.0", "--seed", "5",
             "--out", str(again), "--config", str(tiny_config_file)],
        )
        assert result.exit_code == 0
        for rel in (MANIFEST_FILE, "spk002/utt003.wav"):
            assert (again / rel).read_bytes() == (synth_dir / rel).read_bytes()

    def test_single_speaker_is_a_config_error(self, runner, tmp_path):
        result = runner.invoke(main, ["synth", "--speakers", "1", "--out", str(tmp_path / "c")])
        assert result.exit_code == 1
        assert "Error" in result.output


class TestManifest:
    def test_manifest_elsewhere_resolves_audio(self, runner, synth_dir, tmp_path, tiny_config_file):
        path = tmp_path / "meta" / "corpus.tsv"
        result = runner.invoke(
            main,
            ["manifest", "--root", str(synth_dir), "--out", str(path), "--config", str(tiny_config_file)],
        )
        assert result.exit_code == 0, result.output
        manifest = DatasetManifest.load(path)
        assert manifest.class_count == 3
        assert all(manifest.audio_path(r).is_file() for r in manifest.records)
        assert (path.parent / "config.txt").is_file()

    def test_missing_root(self, runner, tmp_path):
        result = runner.invoke(main, ["manifest", "--root", str(tmp_path / "absent")])
        assert result.exit_code == 2


class TestTrain:
    def test_outputs(self, trained_run):
        assert (trained_run / FINAL_CHECKPOINT).is_file()
        assert (trained_run / "epoch_002.ckpt").is_file()
        assert len((trained_run / LOG_FILE).read_text().splitlines()) == 7
        assert "loss.kind = arcface" in (trained_run / "config.txt").read_text()

    def test_missing_manifest_creates_nothing(self, runner, tmp_path):
        run = tmp_path / "run"
        result = runner.invoke(main, ["train", "--manifest", str(tmp_path / "absent.tsv"), "--out", str(run)])
        assert result.exit_code == 2
        assert not run.exists()

    def test_event_log(self, runner, synth_dir, tmp_path, tiny_config_file):
        run = tmp_path / "logged"
        result = runner.invoke(
            main,
            ["train", "--manifest", str(synth_dir / MANIFEST_FILE), "--out", str(run),
             "--config", str(tiny_config_file), "--epochs", "1", "--log-events"],
        )
        assert result.exit_code == 0, result.output
        lines = (run / "events.jsonl").read_text().splitlines()
        kinds = [json.loads(line)["event_type"] for line in lines]
        assert kinds[0] == "run_start"
        assert kinds.count("batch") == 3
        assert kinds[-1] == "run_end"


class TestEval:
    def test_intra(self, runner, trained_run, synth_dir, tiny_config_file):
        result = runner.invoke(
            main,
            ["eval", "--protocol", "intra", "--ckpt", str(trained_run / FINAL_CHECKPOINT),
             "--manifest", str(synth_dir / MANIFEST_FILE), "--config", str(tiny_config_file),
             "--dump-posteriors"],
        )
        assert result.exit_code == 0, result.output
        out = trained_run / "eval_intra"
        report = json.loads((out / "report.json").read_text())
        assert report["protocol"] == "intra"
        assert report["sentences_evaluated"] == 6
        assert (out / "posteriors.npz").is_file()

    def test_inter(self, runner, trained_run, synth_dir, tiny_config_file, tmp_path):
        out = tmp_path / "inter"
        result = runner.invoke(
            main,
            ["eval", "--protocol", "inter", "--ckpt", str(trained_run / FINAL_CHECKPOINT),
             "--manifest", str(synth_dir / MANIFEST_FILE), "--config", str(tiny_config_file),
             "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        report = json.loads((out / "report.json").read_text())
        assert report["gallery_size"] == 3
        assert report["counts"]["enroll_chunks"] == 10

    def test_class_count_mismatch(self, runner, trained_run, tmp_path, tiny_config_file):
        other = tmp_path / "two"
        assert runner.invoke(
            main,
            ["synth", "--speakers", "2", "--utts", "4", "--seconds", "1.0",
             "--out", str(other), "--config", str(tiny_config_file)],
        ).exit_code == 0
        result = runner.invoke(
            main,
            ["eval", "--protocol", "intra", "--ckpt", str(trained_run / FINAL_CHECKPOINT),
             "--manifest", str(other / MANIFEST_FILE), "--config", str(tiny_config_file)],
        )
        assert result.exit_code == 2
        assert "classes" in result.output


class TestGradcheck:
    def test_passes(self, runner, tmp_path):
        result = runner.invoke(main, ["gradcheck", "--seeds", "1", "--out", str(tmp_path / "gc")])
        assert result.exit_code == 0, result.output
        assert "All gradients match" in result.output
        assert (tmp_path / "gc" / "config.txt").is_file()

    def test_sign_bug_exits_with_numeric_code(self, runner, monkeypatch):
        original = sinc.materialize_backward

        def flipped(params, grad_kernels):
            grad_f_low, grad_band = original(params, grad_kernels)
            return -grad_f_low, -grad_band

        monkeypatch.setattr(sinc, "materialize_backward", flipped)
        result = runner.invoke(main, ["gradcheck", "--seeds", "1"])
        assert result.exit_code == 3
        assert "Gradient check failed" in result.output
        assert "sinc cutoffs" in result.output


class TestFilters:
    def test_single_filter_csv(self, runner, tmp_path):
        path = tmp_path / "filters" / "bank.csv"
        result = runner.invoke(main, ["filters", "--out", str(path), "--filter", "3", "--points", "16"])
        assert result.exit_code == 0, result.output
        lines = path.read_text().splitlines()
        assert lines[0] == "filter,freq_normalized,magnitude_db,freq_hz,low_hz,high_hz,silent"
        assert len(lines) == 17
        assert all(line.startswith("3,") and line.endswith(",0") for line in lines[1:])
        last = lines[-1].split(",")
        assert float(last[1]) == 0.5
        assert float(last[3]) == 8000.0

    def test_from_checkpoint(self, runner, trained_run, tmp_path):
        path = tmp_path / "bank.csv"
        result = runner.invoke(
            main, ["filters", "--ckpt", str(trained_run / FINAL_CHECKPOINT), "--out", str(path), "--points", "8"]
        )
        assert result.exit_code == 0, result.output
        assert len(path.read_text().splitlines()) == 1 + 4 * 8

    def test_zero_band_filter_is_flagged(self, runner, trained_run, tmp_path):
        weights = load_checkpoint(trained_run / FINAL_CHECKPOINT)
        weights.arrays["sinc.band"][1] = 0.0
        ckpt = save_checkpoint(weights, tmp_path / "silent.ckpt")
        path = tmp_path / "bank.csv"
        result = runner.invoke(main, ["filters", "--ckpt", str(ckpt), "--out", str(path), "--points", "8"])
        assert result.exit_code == 0, result.output
        assert "all-zero kernel" in result.output
        rows = [line.split(",") for line in path.read_text().splitlines()[1:]]
        assert {row[6] for row in rows if row[0] == "1"} == {"1"}
        assert {row[6] for row in rows if row[0] != "1"} == {"0"}
        assert all(row[2] == "-inf" for row in rows if row[0] == "1")

    def test_filter_out_of_range(self, runner, tmp_path):
        result = runner.invoke(main, ["filters", "--out", str(tmp_path / "b.csv"), "--filter", "80"])
        assert result.exit_code == 1


class TestUsage:
    def test_unknown_option(self, runner):
        assert runner.invoke(main, ["train", "--bogus"]).exit_code == 1

    def test_unknown_command(self, runner):
        assert runner.invoke(main, ["fly"]).exit_code == 1

    def test_bad_set_key(self, runner, tmp_path):
        result = runner.invoke(
            main, ["filters", "--out", str(tmp_path / "b.csv"), "--set", "loss.margin=0.2"]
        )
        assert result.exit_code == 1
        assert "Unknown config key" in result.output

    def test_version(self, runner):
        result = runner.invoke(main, ["--version"])
        assert result.exit_code == 0
        assert "0.1.0" in result.output
