"""Corpus manifests, duration splits, chunk sampling and synthetic speakers."""

import os
import queue
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .audio import AudioReader, load_wav, write_wav
from .errors import ConfigError, ManifestError
from .logger import NullLogger, RunLogger
from .model import normalize_amplitude

MANIFEST_MAGIC = "#csnc-manifest"
MANIFEST_VERSION = "v1"
MANIFEST_FILE = "manifest.tsv"
SPLITS = ("train", "test", "spare")

DEFAULT_TRAIN_TARGET_S = (12.0, 15.0)
DEFAULT_TEST_TARGET_S = (2.0, 6.0)


@dataclass
class UtteranceRecord:
    """One audio file of one speaker. ``path`` is relative to the corpus root."""

    speaker_id: str
    path: str
    duration_s: float
    split: str = "train"

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ManifestError(f"utterance '{self.path}' has non-positive duration {self.duration_s}")
        if self.split not in SPLITS:
            raise ManifestError(f"utterance '{self.path}' has unknown split '{self.split}'")


@dataclass
class ManifestNote:
    """An exclusion or flag recorded in the manifest metadata."""

    kind: str  # "excluded" or "flagged"
    subject: str
    reason: str


@dataclass
class DatasetManifest:
    """Records of a corpus plus the speaker list that defines class indices."""

    records: List[UtteranceRecord]
    sample_rate: int
    root: Path = field(default_factory=Path)
    notes: List[ManifestNote] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        self.speakers: List[str] = sorted({r.speaker_id for r in self.records})
        self._index = {speaker: i for i, speaker in enumerate(self.speakers)}

    @property
    def class_count(self) -> int:
        return len(self.speakers)

    def class_index(self, speaker_id: str) -> int:
        return self._index[speaker_id]

    def split(self, name: str) -> List[UtteranceRecord]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split '{name}'")
        return [r for r in self.records if r.split == name]

    def audio_path(self, record: UtteranceRecord) -> Path:
        return self.root / record.path

    def relocate(self, new_root: Union[str, Path]) -> "DatasetManifest":
        """Copy whose record paths are relative to ``new_root`` (where the manifest will live)."""
        new_root = Path(new_root)
        records = [
            replace(r, path=Path(os.path.relpath(self.root.resolve() / r.path, new_root.resolve())).as_posix())
            for r in self.records
        ]
        return DatasetManifest(records, self.sample_rate, new_root, list(self.notes))

    @property
    def excluded(self) -> List[ManifestNote]:
        return [n for n in self.notes if n.kind == "excluded"]

    @property
    def flagged(self) -> List[ManifestNote]:
        return [n for n in self.notes if n.kind == "flagged"]

    def to_text(self) -> str:
        lines = [f"{MANIFEST_MAGIC} {MANIFEST_VERSION} sample_rate={self.sample_rate}"]
        for note in self.notes:
            lines.append(f"#{note.kind}\t{note.subject}\t{note.reason}")
        for r in self.records:
            lines.append(f"{r.speaker_id}\t{r.path}\t{r.duration_s:.6f}\t{r.split}")
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_text())
        return path

    @classmethod
    def load(cls, path: Union[str, Path], root: Optional[Union[str, Path]] = None) -> "DatasetManifest":
        """Read a manifest file; audio paths resolve against its directory by default.

        Raises:
            FileNotFoundError: If the file does not exist.
            ManifestError: On a missing header or malformed lines.
        """
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Manifest not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines or not lines[0].startswith(MANIFEST_MAGIC):
            raise ManifestError(f"{path} is not a manifest (missing '{MANIFEST_MAGIC}' header)")
        header = lines[0].split()
        if len(header) != 3 or header[1] != MANIFEST_VERSION or not header[2].startswith("sample_rate="):
            raise ManifestError(f"{path}: unsupported manifest header '{lines[0]}'")
        try:
            sample_rate = int(header[2].split("=", 1)[1])
        except ValueError as e:
            raise ManifestError(f"{path}: bad sample rate in header") from e

        records, notes = [], []
        for line_no, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            fields_ = line.split("\t")
            if line.startswith("#"):
                if len(fields_) == 3 and fields_[0] in ("#excluded", "#flagged"):
                    notes.append(ManifestNote(fields_[0][1:], fields_[1], fields_[2]))
                continue
            if len(fields_) != 4:
                raise ManifestError(f"{path}:{line_no}: expected 4 tab-separated fields")
            try:
                duration = float(fields_[2])
            except ValueError as e:
                raise ManifestError(f"{path}:{line_no}: bad duration '{fields_[2]}'") from e
            records.append(UtteranceRecord(fields_[0], fields_[1], duration, fields_[3]))
        if not records:
            raise ManifestError(f"{path}: manifest has no records")
        return cls(records, sample_rate, Path(root) if root is not None else path.parent, notes)


@dataclass
class BatchSpec:
    """Shape and seed of training batches."""

    batch_size: int = 128
    chunk_len: int = 3200
    seed: int = 1234

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.chunk_len < 1:
            raise ConfigError(f"chunk_len must be >= 1, got {self.chunk_len}")


def split_by_duration(
    records: Sequence[UtteranceRecord],
    train_target_s: Tuple[float, float] = DEFAULT_TRAIN_TARGET_S,
    test_target_s: Tuple[float, float] = DEFAULT_TEST_TARGET_S,
    seed=None,
) -> Tuple[List[UtteranceRecord], Optional[str]]:
    """Assign train/test/spare to the utterances of one speaker.

    Utterances are visited in path order, or shuffled when ``seed`` is given.
    Train takes utterances until its total reaches the low train bound. Test
    then takes utterances while it is below the low test bound or while the
    next utterance still fits under the high test bound. The rest is spare.

    Returns:
        Tuple of (records with splits assigned, in path order; flag reason or
        None when both minima are met).
    """
    ordered = sorted(records, key=lambda r: r.path)
    visit = list(ordered)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(visit))
        visit = [visit[i] for i in order]

    assigned = {}
    train_total = test_total = 0.0
    for record in visit:
        if train_total < train_target_s[0]:
            assigned[record.path] = "train"
            train_total += record.duration_s
        elif test_total < test_target_s[0] or test_total + record.duration_s <= test_target_s[1]:
            assigned[record.path] = "test"
            test_total += record.duration_s
        else:
            assigned[record.path] = "spare"

    flag = None
    if train_total < train_target_s[0] or test_total < test_target_s[0]:
        flag = (
            f"insufficient for split: {train_total:.3f} s train (need {train_target_s[0]:g}), "
            f"{test_total:.3f} s test (need {test_target_s[0]:g})"
        )
    return [replace(r, split=assigned[r.path]) for r in ordered], flag


def build_manifest(
    root_dir: Union[str, Path],
    chunk_ms: float = 200.0,
    train_target_s: Tuple[float, float] = DEFAULT_TRAIN_TARGET_S,
    test_target_s: Tuple[float, float] = DEFAULT_TEST_TARGET_S,
    seed: Optional[int] = None,
    logger: Optional[RunLogger] = None,
) -> DatasetManifest:
    """Index a directory-per-speaker corpus.

    Speakers are the immediate subdirectories of ``root_dir`` in lexicographic
    order. Speakers without audio and utterances shorter than one chunk are
    excluded; speakers that miss a duration minimum are flagged. Both are
    recorded in the manifest metadata and logged as warnings.

    Raises:
        FileNotFoundError: If ``root_dir`` does not exist.
        ManifestError: If no usable audio remains or sample rates differ.
    """
    logger = logger or NullLogger()
    root = Path(root_dir)
    reader = AudioReader()
    speaker_dirs = sorted(_speaker_dirs(root))

    notes: List[ManifestNote] = []
    probed = {}
    rates = set()
    for speaker_dir in speaker_dirs:
        files = reader.find_files(speaker_dir)
        if not files:
            notes.append(ManifestNote("excluded", speaker_dir.name, "no WAV files"))
            logger.log_warning("empty_speaker", f"speaker '{speaker_dir.name}' has no WAV files")
            continue
        infos = [reader.probe(f) for f in files]
        rates.update(info.sample_rate for info in infos)
        probed[speaker_dir.name] = infos

    if not probed:
        raise ManifestError(f"no WAV files found under {root}")
    if len(rates) > 1:
        raise ManifestError(f"mixed sample rates in corpus: {sorted(rates)} (resampling is not supported)")
    sample_rate = rates.pop()
    chunk_len = int(round(sample_rate * chunk_ms / 1000.0))

    records: List[UtteranceRecord] = []
    for speaker_index, (speaker, infos) in enumerate(probed.items()):
        usable = []
        for info in infos:
            rel = Path(info.path).relative_to(root).as_posix()
            if info.frames < chunk_len:
                notes.append(ManifestNote("excluded", rel, f"shorter than one chunk ({info.frames} < {chunk_len} samples)"))
                logger.log_warning("short_utterance", f"excluded '{rel}': shorter than one chunk")
                continue
            usable.append(UtteranceRecord(speaker, rel, info.duration_s))
        if not usable:
            notes.append(ManifestNote("excluded", speaker, "no utterance as long as one chunk"))
            logger.log_warning("empty_speaker", f"speaker '{speaker}' has no usable utterances")
            continue
        split_seed = None if seed is None else [seed, speaker_index]
        assigned, flag = split_by_duration(usable, train_target_s, test_target_s, split_seed)
        if flag:
            notes.append(ManifestNote("flagged", speaker, flag))
            logger.log_warning("insufficient_split", f"speaker '{speaker}' {flag}")
        records.extend(assigned)

    if not records:
        raise ManifestError(f"no usable utterances under {root}")
    return DatasetManifest(records, sample_rate, root, notes)


def _speaker_dirs(root: Path) -> List[Path]:
    if not root.exists():
        raise FileNotFoundError(f"Corpus directory not found: {root}")
    if not root.is_dir():
        raise NotADirectoryError(f"Path is not a directory: {root}")
    return [p for p in root.iterdir() if p.is_dir()]


@dataclass
class SplitAudio:
    """Decoded audio of one manifest split with class labels."""

    waveforms: List[np.ndarray]
    labels: np.ndarray
    records: List[UtteranceRecord]

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(w) for w in self.waveforms], dtype=np.int64)


def load_audio(manifest: DatasetManifest, split: str = "train") -> SplitAudio:
    """Decode every utterance of a split.

    Raises:
        ManifestError: If the split is empty or a file's sample rate disagrees.
    """
    records = manifest.split(split)
    if not records:
        raise ManifestError(f"manifest has no '{split}' utterances")
    waveforms = []
    for record in records:
        samples, sample_rate = load_wav(manifest.audio_path(record))
        if sample_rate != manifest.sample_rate:
            raise ManifestError(
                f"'{record.path}' has sample rate {sample_rate}, manifest says {manifest.sample_rate}"
            )
        waveforms.append(samples)
    labels = np.array([manifest.class_index(r.speaker_id) for r in records], dtype=np.int64)
    return SplitAudio(waveforms, labels, records)


def batch_rng(seed: int, batch_index: int) -> np.random.Generator:
    """Generator keyed on (seed, batch index), independent of draw history."""
    return np.random.default_rng([seed, batch_index])


def draw_positions(lengths: np.ndarray, spec: BatchSpec, batch_index: int) -> Tuple[np.ndarray, np.ndarray]:
    """Utterance indices (uniform over utterances) and chunk offsets (uniform per utterance)."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < spec.chunk_len):
        raise ManifestError(f"an utterance is shorter than chunk_len {spec.chunk_len}")
    rng = batch_rng(spec.seed, batch_index)
    utterances = rng.integers(0, len(lengths), size=spec.batch_size)
    offsets = rng.integers(0, lengths[utterances] - spec.chunk_len + 1)
    return utterances, offsets


def sample_batch(audio: SplitAudio, spec: BatchSpec, batch_index: int) -> Tuple[np.ndarray, np.ndarray]:
    """Chunks [batch_size, chunk_len] (amplitude-normalized) and their labels."""
    utterances, offsets = draw_positions(audio.lengths, spec, batch_index)
    chunks = np.stack(
        [audio.waveforms[u][o : o + spec.chunk_len] for u, o in zip(utterances, offsets)]
    )
    return normalize_amplitude(chunks), audio.labels[utterances]


class BatchPrefetcher:
    """Iterates over batches ``start .. start + count - 1``.

    With ``depth > 0`` a background thread samples up to ``depth`` batches
    ahead. Each batch depends only on its index, so the sequence is the same
    for every depth.
    """

    _DONE = object()

    def __init__(self, audio: SplitAudio, spec: BatchSpec, start: int, count: int, depth: int = 0):
        self.audio = audio
        self.spec = spec
        self.start = start
        self.count = count
        self.depth = depth

    def __iter__(self) -> Iterator[Tuple[int, np.ndarray, np.ndarray]]:
        if self.depth <= 0:
            for index in range(self.start, self.start + self.count):
                yield (index,) + sample_batch(self.audio, self.spec, index)
            return

        buffer: "queue.Queue" = queue.Queue(maxsize=self.depth)
        stop = threading.Event()

        def produce():
            try:
                for index in range(self.start, self.start + self.count):
                    if stop.is_set():
                        return
                    item = (index,) + sample_batch(self.audio, self.spec, index)
                    while not stop.is_set():
                        try:
                            buffer.put(item, timeout=0.1)
                            break
                        except queue.Full:
                            continue
            except BaseException as e:  # re-raised in the consumer
                buffer.put(e)
                return
            buffer.put(self._DONE)

        worker = threading.Thread(target=produce, daemon=True)
        worker.start()
        try:
            while True:
                item = buffer.get()
                if item is self._DONE:
                    return
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            stop.set()
            worker.join(timeout=1.0)


# Synthetic corpus

F0_RANGE_HZ = (80.0, 300.0)
MIN_F0_SEPARATION_HZ = 5.0
HARMONICS = 6
SNR_DB = 20.0


@dataclass
class SyntheticSpeaker:
    """Fixed harmonic voice profile."""

    name: str
    f0: float
    amplitudes: np.ndarray
    tilt_db_per_octave: float


def _draw_fundamentals(rng: np.random.Generator, count: int, max_attempts: int = 100000) -> List[float]:
    low, high = F0_RANGE_HZ
    if count > int((high - low) / MIN_F0_SEPARATION_HZ) + 1:
        raise ConfigError(f"cannot place {count} fundamentals {MIN_F0_SEPARATION_HZ:g} Hz apart in {F0_RANGE_HZ}")
    chosen: List[float] = []
    attempts = 0
    while len(chosen) < count:
        attempts += 1
        if attempts > max_attempts:
            raise ConfigError(f"could not draw {count} separated fundamentals")
        f0 = float(rng.uniform(low, high))
        if all(abs(f0 - other) >= MIN_F0_SEPARATION_HZ for other in chosen):
            chosen.append(f0)
    return chosen


def make_speakers(n_speakers: int, rng: np.random.Generator) -> List[SyntheticSpeaker]:
    fundamentals = _draw_fundamentals(rng, n_speakers)
    return [
        SyntheticSpeaker(
            name=f"spk{i:03d}",
            f0=f0,
            amplitudes=rng.uniform(0.2, 1.0, size=HARMONICS),
            tilt_db_per_octave=float(rng.uniform(-9.0, -1.0)),
        )
        for i, f0 in enumerate(fundamentals)
    ]


def synth_utterance(
    speaker: SyntheticSpeaker, seconds: float, sample_rate: int, rng: np.random.Generator
) -> np.ndarray:
    """One utterance: the speaker's harmonics with slight pitch jitter, 20 dB SNR noise and random gain."""
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = speaker.f0 * (1.0 + rng.uniform(-0.01, 0.01))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=HARMONICS)
    signal = np.zeros(n)
    for h in range(1, HARMONICS + 1):
        freq = h * f0
        if freq >= sample_rate / 2:
            break
        gain = speaker.amplitudes[h - 1] * 10.0 ** (speaker.tilt_db_per_octave * np.log2(h) / 20.0)
        signal += gain * np.sin(2.0 * np.pi * freq * t + phases[h - 1])
    signal /= np.sqrt(np.mean(signal**2))
    signal += rng.standard_normal(n) * 10.0 ** (-SNR_DB / 20.0)
    peak_gain = rng.uniform(0.1, 0.9)
    return peak_gain * signal / np.max(np.abs(signal))


def synth_corpus(
    out_dir: Union[str, Path],
    n_speakers: int,
    utterances_per_speaker: int,
    seconds_per_utterance: float,
    sample_rate: int = 16000,
    seed: int = 0,
    chunk_ms: float = 200.0,
    train_target_s: Tuple[float, float] = DEFAULT_TRAIN_TARGET_S,
    test_target_s: Tuple[float, float] = DEFAULT_TEST_TARGET_S,
    logger: Optional[RunLogger] = None,
) -> DatasetManifest:
    """Write a synthetic directory-per-speaker corpus and its manifest.

    Files go to ``out_dir/spkNNN/uttNNN.wav`` as 16-bit PCM; the manifest is
    saved to ``out_dir/manifest.tsv``.

    Raises:
        ConfigError: If fewer than two speakers or no audio is requested.
    """
    if n_speakers < 2:
        raise ConfigError(f"need at least 2 speakers for identification, got {n_speakers}")
    if utterances_per_speaker < 1 or seconds_per_utterance <= 0:
        raise ConfigError("need at least one utterance of positive length per speaker")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    for speaker in make_speakers(n_speakers, rng):
        for u in range(utterances_per_speaker):
            samples = synth_utterance(speaker, seconds_per_utterance, sample_rate, rng)
            write_wav(out / speaker.name / f"utt{u:03d}.wav", samples, sample_rate)
    manifest = build_manifest(out, chunk_ms, train_target_s, test_target_s, logger=logger)
    manifest.save(out / MANIFEST_FILE)
    return manifest
