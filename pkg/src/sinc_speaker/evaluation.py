"""Intra-corpus FER/CER and inter-corpus gallery identification."""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numeric
from .data import DatasetManifest, SplitAudio, load_audio
from .errors import ClassCountMismatchError, ManifestError, ZeroNormError
from .logger import NullLogger, RunLogger
from .losses import posteriors as head_posteriors
from .model import ModelWeights, embed

TIE_TOLERANCE = 1e-12
EMBED_BATCH = 256


@dataclass
class EvalReport:
    """Result of one evaluation run, serialized as sorted-key JSON."""

    protocol: str
    cer_percent: float
    frames_evaluated: int
    sentences_evaluated: int
    config_fingerprint: str = ""
    fer_percent: Optional[float] = None
    gallery_size: Optional[int] = None
    eval_logits: Optional[str] = None
    counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_json())
        return path


def tile_frames(samples: np.ndarray, chunk_len: int, overlap: float = 0.0) -> np.ndarray:
    """Cut an utterance into frames of ``chunk_len`` samples.

    The hop is ``chunk_len * (1 - overlap)``; a trailing partial frame is dropped.

    Returns:
        Array [n_frames, chunk_len] (n_frames may be 0).
    """
    hop = max(1, int(round(chunk_len * (1.0 - overlap))))
    if len(samples) < chunk_len:
        return np.zeros((0, chunk_len))
    count = (len(samples) - chunk_len) // hop + 1
    starts = np.arange(count) * hop
    return np.stack([samples[s : s + chunk_len] for s in starts])


def embed_frames(weights: ModelWeights, frames: np.ndarray) -> np.ndarray:
    """Embeddings of many frames, computed in bounded sub-batches."""
    parts = [embed(weights, frames[i : i + EMBED_BATCH]) for i in range(0, len(frames), EMBED_BATCH)]
    return np.concatenate(parts, axis=0)


def _ordered_map(fn: Callable, items: Sequence, threads: int) -> List:
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def utterance_posteriors(
    weights: ModelWeights,
    waveforms: Sequence[np.ndarray],
    mode: str = "plain",
    overlap: float = 0.0,
    threads: int = 1,
) -> List[np.ndarray]:
    """Per-frame class posteriors [n_frames, C] for each utterance, in input order."""
    chunk_len = weights.config.chunk_len

    def one(samples: np.ndarray) -> np.ndarray:
        frames = tile_frames(samples, chunk_len, overlap)
        if len(frames) == 0:
            return np.zeros((0, weights.class_count))
        emb = embed_frames(weights, frames)
        return head_posteriors(weights.loss_config, emb, weights.head_weight, weights.head_bias, mode)

    return _ordered_map(one, waveforms, threads)


def fer_from_posteriors(posteriors: Sequence[np.ndarray], labels: Sequence[int]) -> Tuple[float, int]:
    """Frame error rate (percent) and number of frames.

    Raises:
        ManifestError: If there are no frames.
    """
    wrong = total = 0
    for post, label in zip(posteriors, labels):
        if len(post) == 0:
            continue
        wrong += int(np.sum(np.argmax(post, axis=1) != label))
        total += len(post)
    if total == 0:
        raise ManifestError("no frames to evaluate")
    return 100.0 * wrong / total, total


def cer_from_posteriors(posteriors: Sequence[np.ndarray], labels: Sequence[int]) -> Tuple[float, int]:
    """Classification error rate (percent) over utterances and number of utterances.

    Each utterance is assigned the argmax of its frame-averaged posterior.
    Utterances without frames are not counted.
    """
    wrong = total = 0
    for post, label in zip(posteriors, labels):
        if len(post) == 0:
            continue
        wrong += int(np.argmax(post.mean(axis=0)) != label)
        total += 1
    if total == 0:
        raise ManifestError("no utterances to evaluate")
    return 100.0 * wrong / total, total


def _check_classes(weights: ModelWeights, manifest: DatasetManifest) -> None:
    if weights.class_count != manifest.class_count:
        raise ClassCountMismatchError(
            f"checkpoint has {weights.class_count} classes, manifest has {manifest.class_count} speakers"
        )
    if weights.speakers and list(weights.speakers) != list(manifest.speakers):
        raise ManifestError("manifest speakers do not match the checkpoint's training speakers")


@dataclass
class IntraResult:
    report: EvalReport
    posteriors: List[np.ndarray]
    labels: np.ndarray
    paths: List[str]

    def dump_posteriors(self, path: Union[str, Path]) -> Path:
        """Write frame posteriors, per-frame utterance index and labels to ``.npz``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        classes = self.report.counts.get("classes", 0)
        frames = [p for p in self.posteriors if len(p)]
        np.savez(
            path,
            posteriors=np.concatenate(frames) if frames else np.zeros((0, classes)),
            utterance=np.concatenate(
                [np.full(len(p), i, dtype=np.int64) for i, p in enumerate(self.posteriors)]
            ),
            labels=self.labels,
            paths=np.array(self.paths),
        )
        return path


def evaluate_intra(
    weights: ModelWeights,
    manifest: DatasetManifest,
    mode: str = "plain",
    overlap: float = 0.0,
    threads: int = 1,
    fingerprint: str = "",
    audio: Optional[SplitAudio] = None,
) -> IntraResult:
    """FER and CER on the manifest's test split.

    Raises:
        ClassCountMismatchError: If the checkpoint was trained on another class count.
        ManifestError: If the test split is empty or the speakers differ.
    """
    _check_classes(weights, manifest)
    audio = audio or load_audio(manifest, "test")
    posts = utterance_posteriors(weights, audio.waveforms, mode, overlap, threads)
    fer, frames = fer_from_posteriors(posts, audio.labels)
    cer, sentences = cer_from_posteriors(posts, audio.labels)
    report = EvalReport(
        protocol="intra",
        fer_percent=fer,
        cer_percent=cer,
        frames_evaluated=frames,
        sentences_evaluated=sentences,
        config_fingerprint=fingerprint,
        eval_logits=mode,
        counts={
            "classes": weights.class_count,
            "utterances_without_frames": sum(1 for p in posts if len(p) == 0),
        },
    )
    return IntraResult(report, posts, audio.labels, [r.path for r in audio.records])


def frame_error_rate(weights: ModelWeights, manifest: DatasetManifest, **kwargs) -> float:
    return evaluate_intra(weights, manifest, **kwargs).report.fer_percent


def sentence_cer(weights: ModelWeights, manifest: DatasetManifest, **kwargs) -> float:
    return evaluate_intra(weights, manifest, **kwargs).report.cer_percent


# Inter-corpus identification


@dataclass
class Gallery:
    """Enrolled speakers (lexicographic order) and their unit-norm embeddings."""

    speakers: List[str]
    embeddings: np.ndarray
    excluded: Dict[str, str] = field(default_factory=dict)

    @property
    def entries(self) -> Dict[str, np.ndarray]:
        return dict(zip(self.speakers, self.embeddings))

    def __len__(self) -> int:
        return len(self.speakers)


@dataclass
class ProbeDecision:
    path: str
    speaker: str
    predicted: str
    similarity: float
    tie: bool

    @property
    def correct(self) -> bool:
        return self.predicted == self.speaker


def mean_direction(embeddings: np.ndarray) -> np.ndarray:
    """Mean of L2-normalized rows, re-normalized.

    Raises:
        ZeroNormError: If the mean is the zero vector.
    """
    mean = numeric.l2_normalize(np.asarray(embeddings, dtype=numeric.DTYPE)).mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise ZeroNormError("mean embedding direction is undefined (zero vector)")
    return mean / norm


def split_enrollment(
    records: Sequence, waveforms: Sequence[np.ndarray], enroll_chunks: int, chunk_len: int, overlap: float = 0.0
) -> Tuple[Dict[str, List[int]], List[int]]:
    """Split test utterances into enrollment and probe sets per speaker.

    Whole utterances are consumed in order until ``enroll_chunks`` frames are
    available; the speaker's remaining utterances become probes.

    Returns:
        Tuple of (speaker -> enrollment utterance indices, probe utterance indices).
    """
    enroll: Dict[str, List[int]] = {}
    frames: Dict[str, int] = {}
    probes: List[int] = []
    for i, (record, samples) in enumerate(zip(records, waveforms)):
        speaker = record.speaker_id
        if frames.get(speaker, 0) < enroll_chunks:
            enroll.setdefault(speaker, []).append(i)
            frames[speaker] = frames.get(speaker, 0) + len(tile_frames(samples, chunk_len, overlap))
        else:
            probes.append(i)
    return enroll, probes


def build_gallery(
    weights: ModelWeights,
    enrollment: Dict[str, Sequence[np.ndarray]],
    enroll_chunks: int,
    overlap: float = 0.0,
    logger: Optional[RunLogger] = None,
) -> Gallery:
    """Enroll each speaker from the first ``enroll_chunks`` frames of its audio.

    Speakers with too few frames are excluded and reported in ``Gallery.excluded``.
    """
    logger = logger or NullLogger()
    chunk_len = weights.config.chunk_len
    speakers, vectors, excluded = [], [], {}
    for speaker in sorted(enrollment):
        frames = [tile_frames(w, chunk_len, overlap) for w in enrollment[speaker]]
        frames = np.concatenate(frames) if frames else np.zeros((0, chunk_len))
        if len(frames) < enroll_chunks:
            excluded[speaker] = f"only {len(frames)} of {enroll_chunks} enrollment frames"
            logger.log_warning("enrollment_excluded", f"speaker '{speaker}': {excluded[speaker]}")
            continue
        emb = embed_frames(weights, frames[:enroll_chunks])
        try:
            vectors.append(mean_direction(emb))
        except ZeroNormError:
            excluded[speaker] = "enrollment embedding has zero norm"
            logger.log_warning("enrollment_excluded", f"speaker '{speaker}': {excluded[speaker]}")
            continue
        speakers.append(speaker)
    dim = weights.config.embedding_dim
    matrix = np.stack(vectors) if vectors else np.zeros((0, dim))
    return Gallery(speakers, matrix, excluded)


def identify_embedding(gallery: Gallery, probe: np.ndarray) -> Tuple[str, float, bool]:
    """Best gallery speaker for one unit-norm probe direction.

    Similarities within 1e-12 of the maximum count as ties; the
    lexicographically smallest speaker wins.

    Returns:
        Tuple of (speaker, similarity, tie).
    """
    if len(gallery) == 0:
        raise ManifestError("gallery is empty")
    sims = np.clip(gallery.embeddings @ probe, -1.0, 1.0)
    best = sims.max()
    tied = np.nonzero(sims >= best - TIE_TOLERANCE)[0]
    winner = min(tied, key=lambda i: gallery.speakers[i])
    return gallery.speakers[winner], float(sims[winner]), len(tied) > 1


def identify(
    weights: ModelWeights,
    gallery: Gallery,
    probes: Sequence[Tuple[str, str, np.ndarray]],
    overlap: float = 0.0,
    threads: int = 1,
    logger: Optional[RunLogger] = None,
) -> Tuple[float, List[ProbeDecision], int]:
    """Identify probe utterances against the gallery.

    Args:
        probes: (path, true speaker, samples) triples.

    Returns:
        Tuple of (CER percent, decisions, number of probes skipped because
        their speaker is not enrolled or they have no frames).

    Raises:
        ManifestError: If the gallery is empty or no probe can be scored.
    """
    logger = logger or NullLogger()
    if len(gallery) == 0:
        raise ManifestError("gallery is empty")
    enrolled = set(gallery.speakers)
    usable = [p for p in probes if p[1] in enrolled]
    chunk_len = weights.config.chunk_len

    def direction(samples: np.ndarray) -> Optional[np.ndarray]:
        frames = tile_frames(samples, chunk_len, overlap)
        if len(frames) == 0:
            return None
        return mean_direction(embed_frames(weights, frames))

    vectors = _ordered_map(direction, [p[2] for p in usable], threads)
    decisions = []
    for (path, speaker, _), vector in zip(usable, vectors):
        if vector is None:
            continue
        predicted, similarity, tie = identify_embedding(gallery, vector)
        if tie:
            logger.log_warning("identification_tie", f"tie for probe '{path}'", {"predicted": predicted})
        decisions.append(ProbeDecision(path, speaker, predicted, similarity, tie))
    skipped = len(probes) - len(decisions)
    if not decisions:
        raise ManifestError("no probe utterances to identify")
    cer = 100.0 * sum(not d.correct for d in decisions) / len(decisions)
    return cer, decisions, skipped


@dataclass
class InterResult:
    report: EvalReport
    gallery: Gallery
    decisions: List[ProbeDecision]


def evaluate_inter(
    weights: ModelWeights,
    manifest: DatasetManifest,
    enroll_chunks: int = 10,
    overlap: float = 0.0,
    threads: int = 1,
    fingerprint: str = "",
    logger: Optional[RunLogger] = None,
    audio: Optional[SplitAudio] = None,
) -> InterResult:
    """Enroll and identify on the test split of a (possibly unseen) corpus."""
    if manifest.sample_rate != weights.config.sample_rate:
        raise ManifestError(
            f"manifest sample rate {manifest.sample_rate} differs from model {weights.config.sample_rate}"
        )
    audio = audio or load_audio(manifest, "test")
    enroll_idx, probe_idx = split_enrollment(
        audio.records, audio.waveforms, enroll_chunks, weights.config.chunk_len, overlap
    )
    enrollment = {s: [audio.waveforms[i] for i in idx] for s, idx in enroll_idx.items()}
    gallery = build_gallery(weights, enrollment, enroll_chunks, overlap, logger)
    probes = [(audio.records[i].path, audio.records[i].speaker_id, audio.waveforms[i]) for i in probe_idx]
    cer, decisions, skipped = identify(weights, gallery, probes, overlap, threads, logger)
    scored = {d.path for d in decisions}
    probe_frames = sum(
        len(tile_frames(samples, weights.config.chunk_len, overlap))
        for path, _, samples in probes
        if path in scored
    )
    report = EvalReport(
        protocol="inter",
        cer_percent=cer,
        frames_evaluated=probe_frames,
        sentences_evaluated=len(decisions),
        config_fingerprint=fingerprint,
        gallery_size=len(gallery),
        counts={
            "enroll_chunks": enroll_chunks,
            "excluded_speakers": len(gallery.excluded),
            "skipped_probes": skipped,
            "ties": sum(d.tie for d in decisions),
        },
    )
    return InterResult(report, gallery, decisions)
