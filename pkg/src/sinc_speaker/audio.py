"""WAV reading, probing and writing."""

import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import soundfile as sf

from .errors import AudioFormatError, ChannelCountError, UnsupportedCodecError

PCM_SCALE = 32768.0


@dataclass
class AudioInfo:
    """Header facts about one WAV file."""

    path: str
    sample_rate: int
    frames: int
    channels: int
    subtype: str

    @property
    def duration_s(self) -> float:
        return self.frames / self.sample_rate


class AudioReader:
    """Handles reading and header probing of mono WAV files."""

    SUPPORTED_EXTENSIONS = {".wav": "WAV"}
    SUPPORTED_SUBTYPES = {"PCM_16": "16-bit signed PCM", "FLOAT": "32-bit IEEE float"}

    def probe(self, file_path: Union[str, Path]) -> AudioInfo:
        """Read a WAV header and check that it is decodable.

        Args:
            file_path: Path to the file to probe.

        Returns:
            Header information.

        Raises:
            FileNotFoundError: If file doesn't exist.
            AudioFormatError: If the file is not RIFF/WAVE.
            ChannelCountError: If the file is not mono.
            UnsupportedCodecError: If the subtype is not 16-bit PCM or 32-bit float.
        """
        path = Path(file_path)
        if not path.exists():
            raise FileNotFoundError(f"File not found: {file_path}")
        if not path.is_file():
            raise AudioFormatError(f"Path is not a file: {file_path}")

        try:
            info = sf.info(str(path))
        except RuntimeError as e:
            raise AudioFormatError(f"Not a readable WAV file: {file_path} ({e})") from e

        if info.format != "WAV":
            raise AudioFormatError(f"Not a RIFF/WAVE file: {file_path} (format {info.format})")
        if info.channels != 1:
            raise ChannelCountError(f"Expected mono audio, {file_path} has {info.channels} channels")
        if info.subtype not in self.SUPPORTED_SUBTYPES:
            raise UnsupportedCodecError(
                f"Unsupported WAV subtype {info.subtype} in {file_path}. "
                f"Supported: {', '.join(self.SUPPORTED_SUBTYPES)}"
            )
        return AudioInfo(
            path=str(path),
            sample_rate=int(info.samplerate),
            frames=int(info.frames),
            channels=int(info.channels),
            subtype=info.subtype,
        )

    def read(self, file_path: Union[str, Path]) -> Tuple[np.ndarray, int]:
        """Decode a mono WAV file to float64 samples.

        16-bit samples are divided by 32768, so they lie in [-1, 1).

        Returns:
            Tuple of (samples, sample_rate).
        """
        info = self.probe(file_path)
        try:
            if info.subtype == "PCM_16":
                data, sample_rate = sf.read(info.path, dtype="int16", always_2d=False)
                samples = data.astype(np.float64) / PCM_SCALE
            else:
                data, sample_rate = sf.read(info.path, dtype="float32", always_2d=False)
                samples = data.astype(np.float64)
        except RuntimeError as e:
            raise AudioFormatError(f"Failed to decode {file_path}: {e}") from e
        return samples.reshape(-1), int(sample_rate)

    def is_supported(self, file_path: Union[str, Path]) -> bool:
        return Path(file_path).suffix.lower() in self.SUPPORTED_EXTENSIONS

    def find_files(self, directory: Union[str, Path], recursive: bool = True) -> List[str]:
        """Find all WAV files in a directory.

        Args:
            directory: Directory path to search.
            recursive: Whether to search recursively.

        Returns:
            Sorted list of file paths.

        Raises:
            FileNotFoundError: If the directory does not exist.
            NotADirectoryError: If path is not a directory.
        """
        dir_path = Path(directory)

        if not dir_path.exists():
            raise FileNotFoundError(f"Directory not found: {directory}")

        if not dir_path.is_dir():
            raise NotADirectoryError(f"Path is not a directory: {directory}")

        files = []
        if recursive:
            for root, _, filenames in os.walk(dir_path):
                for filename in filenames:
                    file_path = Path(root) / filename
                    if self.is_supported(file_path):
                        files.append(str(file_path))
        else:
            for item in dir_path.iterdir():
                if item.is_file() and self.is_supported(item):
                    files.append(str(item))

        return sorted(files)


def load_wav(path: Union[str, Path]) -> Tuple[np.ndarray, int]:
    """Decode a mono WAV file. See ``AudioReader.read``."""
    return AudioReader().read(path)


def write_wav(path: Union[str, Path], samples: np.ndarray, sample_rate: int) -> Path:
    """Write samples in [-1, 1] as a 16-bit PCM mono WAV file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE), -32768, 32767)
    sf.write(str(path), pcm.astype(np.int16), sample_rate, subtype="PCM_16", format="WAV")
    return path
