"""Tests for frame/sentence error rates and gallery identification."""

import json

import numpy as np
import pytest

from sinc_speaker import evaluation
from sinc_speaker.data import DatasetManifest, UtteranceRecord, load_audio
from sinc_speaker.errors import ClassCountMismatchError, ManifestError, ZeroNormError
from sinc_speaker.evaluation import (
    Gallery,
    cer_from_posteriors,
    evaluate_inter,
    evaluate_intra,
    fer_from_posteriors,
    identify_embedding,
    mean_direction,
    split_enrollment,
    tile_frames,
)
from sinc_speaker.losses import posteriors
from sinc_speaker.model import embed, init_model


@pytest.fixture
def corpus_weights(corpus, model_config):
    _, manifest = corpus
    return init_model(model_config, manifest.class_count, seed=2, speakers=manifest.speakers)


class TestFrames:
    @pytest.mark.parametrize("overlap, count", [(0.0, 5), (0.5, 9)])
    def test_one_second(self, overlap, count):
        frames = tile_frames(np.arange(16000.0), 3200, overlap)
        assert frames.shape == (count, 3200)
        assert frames[1, 0] == 3200 * (1 - overlap)

    def test_partial_frame_dropped(self):
        assert tile_frames(np.zeros(7000), 3200).shape == (2, 3200)

    def test_shorter_than_chunk(self):
        assert tile_frames(np.zeros(3199), 3200).shape == (0, 3200)


class TestErrorRates:
    def test_cer_averages_frames(self):
        post = [np.array([[0.9, 0.1], [0.4, 0.6], [0.8, 0.2]])]
        cer, sentences = cer_from_posteriors(post, [0])
        fer, frames = fer_from_posteriors(post, [0])
        assert (cer, sentences) == (0.0, 1)
        assert fer == pytest.approx(100.0 / 3)
        assert frames == 3

    def test_single_frame_cer_equals_fer(self, rng):
        post = [rng.dirichlet(np.ones(4))[None, :] for _ in range(50)]
        labels = rng.integers(0, 4, size=50)
        assert cer_from_posteriors(post, labels)[0] == fer_from_posteriors(post, labels)[0]

    def test_random_classifier_is_at_chance(self, rng):
        classes, n = 4, 20000
        post = [rng.uniform(size=(n, classes))]
        labels = [0]
        fer, _ = fer_from_posteriors(post, labels)
        p = 1 - 1 / classes
        assert abs(fer / 100 - p) < 4 * np.sqrt(p * (1 - p) / n)

    def test_perfect_classifier(self):
        post = [np.array([[0.0, 1.0]] * 4), np.array([[1.0, 0.0]] * 2)]
        assert fer_from_posteriors(post, [1, 0])[0] == 0.0
        assert cer_from_posteriors(post, [1, 0])[0] == 0.0

    def test_utterances_without_frames_are_skipped(self):
        post = [np.zeros((0, 2)), np.array([[0.2, 0.8]])]
        assert cer_from_posteriors(post, [0, 0]) == (100.0, 1)

    def test_no_frames(self):
        with pytest.raises(ManifestError):
            fer_from_posteriors([np.zeros((0, 3))], [0])
        with pytest.raises(ManifestError):
            cer_from_posteriors([], [])


class TestGallery:
    def test_mean_direction_of_one_row(self):
        np.testing.assert_allclose(mean_direction(np.array([[3.0, 4.0]])), [0.6, 0.8])

    def test_duplicates_do_not_change_direction(self):
        row = np.array([[1.0, 2.0, 2.0]])
        np.testing.assert_allclose(mean_direction(np.repeat(row, 5, axis=0)), row[0] / 3.0)

    def test_rows_are_normalized_before_averaging(self):
        np.testing.assert_allclose(
            mean_direction(np.array([[100.0, 0.0], [0.0, 1.0]])), [np.sqrt(0.5), np.sqrt(0.5)]
        )

    def test_opposite_rows(self):
        with pytest.raises(ZeroNormError):
            mean_direction(np.array([[1.0, 0.0], [-1.0, 0.0]]))

    def test_tie_goes_to_smallest_name(self):
        gallery = Gallery(["b", "a"], np.array([[1.0, 0.0], [1.0, 0.0]]))
        speaker, similarity, tie = identify_embedding(gallery, np.array([1.0, 0.0]))
        assert (speaker, tie) == ("a", True)
        assert similarity == pytest.approx(1.0)

    def test_self_match(self):
        gallery = Gallery(["a", "b", "c"], np.eye(3))
        assert identify_embedding(gallery, np.array([0.0, 1.0, 0.0])) == ("b", 1.0, False)

    def test_empty_gallery(self):
        with pytest.raises(ManifestError):
            identify_embedding(Gallery([], np.zeros((0, 3))), np.ones(3) / np.sqrt(3))

    def test_random_gallery_is_at_chance(self, rng):
        size, dim, n = 10, 32, 4000
        names = [f"s{i}" for i in range(size)]
        vectors = rng.standard_normal((size, dim))
        gallery = Gallery(names, vectors / np.linalg.norm(vectors, axis=1, keepdims=True))
        wrong = 0
        for _ in range(n):
            probe = rng.standard_normal(dim)
            predicted, _, _ = identify_embedding(gallery, probe / np.linalg.norm(probe))
            wrong += predicted != names[rng.integers(size)]
        p = 1 - 1 / size
        assert abs(wrong / n - p) < 4 * np.sqrt(p * (1 - p) / n)

    def test_split_enrollment(self):
        records = [UtteranceRecord(s, f"{s}/{i}.wav", 1.0) for s, i in [("a", 0), ("a", 1), ("a", 2), ("b", 0)]]
        waveforms = [np.zeros(300), np.zeros(300), np.zeros(300), np.zeros(1000)]
        enroll, probes = split_enrollment(records, waveforms, enroll_chunks=5, chunk_len=100)
        assert enroll == {"a": [0, 1], "b": [3]}
        assert probes == [2]


class TestIntra:
    def test_report(self, corpus, corpus_weights):
        _, manifest = corpus
        result = evaluate_intra(corpus_weights, manifest, fingerprint="f00d")
        report = result.report
        assert report.protocol == "intra"
        assert report.frames_evaluated == 6 * (8000 // 128)
        assert report.sentences_evaluated == 6
        assert 0.0 <= report.fer_percent <= 100.0
        assert report.cer_percent in {100.0 * k / 6 for k in range(7)}
        assert json.loads(report.to_json())["config_fingerprint"] == "f00d"

    def test_threads_do_not_change_results(self, corpus, corpus_weights):
        _, manifest = corpus
        audio = load_audio(manifest, "test")
        single = evaluate_intra(corpus_weights, manifest, threads=1, audio=audio)
        pooled = evaluate_intra(corpus_weights, manifest, threads=3, audio=audio)
        assert single.report == pooled.report
        for a, b in zip(single.posteriors, pooled.posteriors):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_overlap_increases_frames(self, corpus, corpus_weights):
        _, manifest = corpus
        plain = evaluate_intra(corpus_weights, manifest).report.frames_evaluated
        overlapped = evaluate_intra(corpus_weights, manifest, overlap=0.5).report.frames_evaluated
        assert overlapped > plain

    def test_class_count_mismatch(self, corpus, model_config):
        _, manifest = corpus
        with pytest.raises(ClassCountMismatchError):
            evaluate_intra(init_model(model_config, 5, seed=0), manifest)

    def test_speaker_mismatch(self, corpus, model_config):
        _, manifest = corpus
        weights = init_model(model_config, 3, seed=0, speakers=["x", "y", "z"])
        with pytest.raises(ManifestError):
            evaluate_intra(weights, manifest)

    def test_dumped_posteriors_match_recomputation(self, corpus, corpus_weights, tmp_path):
        _, manifest = corpus
        result = evaluate_intra(corpus_weights, manifest)
        dump = np.load(result.dump_posteriors(tmp_path / "posteriors.npz"))
        assert dump["posteriors"].shape == (result.report.frames_evaluated, 3)
        np.testing.assert_array_equal(dump["labels"], result.labels)

        first = load_audio(manifest, "test").waveforms[0]
        frames = tile_frames(first, corpus_weights.config.chunk_len)
        expected = posteriors(
            corpus_weights.loss_config,
            embed(corpus_weights, frames),
            corpus_weights.head_weight,
            corpus_weights.head_bias,
        )
        np.testing.assert_allclose(dump["posteriors"][dump["utterance"] == 0], expected, atol=1e-12)


class TestInter:
    def test_report(self, corpus, corpus_weights):
        _, manifest = corpus
        result = evaluate_inter(corpus_weights, manifest, enroll_chunks=10)
        report = result.report
        assert report.protocol == "inter"
        assert report.gallery_size == 3
        assert report.sentences_evaluated == 3
        assert report.fer_percent is None
        assert result.gallery.speakers == manifest.speakers
        assert report.counts["skipped_probes"] == 0

    def test_unseen_speakers_need_no_class_match(self, corpus, model_config):
        _, manifest = corpus
        weights = init_model(model_config, 7, seed=1)
        assert evaluate_inter(weights, manifest, enroll_chunks=10).report.gallery_size == 3

    def test_no_probes_left(self, corpus, corpus_weights):
        _, manifest = corpus
        audio = load_audio(manifest, "test")
        with pytest.raises(ManifestError):
            # 62 frames per utterance: both utterances go to enrollment, no probes remain
            evaluate_inter(corpus_weights, manifest, enroll_chunks=100, audio=audio)

    def test_sample_rate_mismatch(self, corpus, corpus_weights):
        _, manifest = corpus
        other = DatasetManifest(manifest.records, 16000, manifest.root)
        with pytest.raises(ManifestError, match="sample rate"):
            evaluate_inter(corpus_weights, other)

    def test_gallery_exclusion_is_reported(self, corpus_weights, rng):
        gallery = evaluation.build_gallery(
            corpus_weights, {"a": [np.zeros(200)], "b": [rng.uniform(-1, 1, 1000)]}, enroll_chunks=3
        )
        assert gallery.speakers == ["b"]
        assert "a" in gallery.excluded
