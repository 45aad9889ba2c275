"""Run configuration for sinc-speaker."""

import hashlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from . import losses, training
from .checkpoint import DTYPE_CODES
from .data import BatchSpec
from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigManager:
    """Manages the effective configuration of one run.

    Configuration is merged with the following precedence (highest to lowest):
    1. Command-line overrides (``apply_overrides``)
    2. A ``key = value`` config file (``load``)
    3. Default values

    Keys use dot notation (``loss.m``). Every value is coerced to the type
    of its default; integer lists are written comma-separated.
    """

    CONFIG_FILE = "config.txt"

    LOSS_KINDS = losses.LOSS_KINDS
    OPTIMIZERS = training.OPTIMIZERS
    EVAL_LOGITS = losses.EVAL_LOGITS
    CHECKPOINT_DTYPES = list(DTYPE_CODES)

    DEFAULT_CONFIG = {
        "data": {
            "sample_rate": 16000,
            "chunk_ms": 200.0,
            "train_min_s": 12.0,
            "train_max_s": 15.0,
            "test_min_s": 2.0,
            "test_max_s": 6.0,
            "split_seed": -1,  # -1 keeps lexicographic order
        },
        "sinc": {
            "filters": 80,
            "kernel_len": 251,
            "stride": 1,
            "pool": 3,
            "f_min": 30.0,
            "f_max": 0.0,  # 0 means Nyquist
            "min_low_hz": 50.0,
            "window": True,
        },
        "model": {
            "conv_filters": [60, 60],
            "conv_kernels": [5, 5],
            "conv_pools": [3, 3],
            "fc_layers": [2048, 2048],
            "embedding_dim": 2048,
            "leaky_slope": 0.2,
            "layer_norm_eps": 1e-6,
        },
        "loss": {
            "kind": "curricular",
            "m": 0.5,
            "s": 64.0,
            "alpha": 0.99,
            "r_statistic": "mean",
            "t_update": "paper",
        },
        "train": {
            "batch_size": 128,
            "learning_rate": 0.01,
            "optimizer": "rmsprop",
            "rmsprop_decay": 0.95,
            "rmsprop_eps": 1e-7,
            "epochs": 10,
            "batches_per_epoch": 800,
            "seed": 1234,
            "checkpoint_every": 1,
            "prefetch": 0,
            "checkpoint_dtype": "float64",
        },
        "eval": {
            "eval_logits": "plain",
            "frame_overlap": 0.0,
            "enroll_chunks": 10,
            "threads": 1,
        },
        "gradcheck": {
            "seeds": 20,
            "step": 1e-5,
            "tolerance": 1e-4,
        },
        "logging": {
            "enabled": False,
        },
    }

    def __init__(self):
        """Initialize with a copy of the defaults."""
        self._config: Dict[str, Any] = self._deep_copy_config(self.DEFAULT_CONFIG)

    def load(self, path: Union[str, Path]) -> Dict[str, Any]:
        """Merge a ``key = value`` config file over the current values.

        Args:
            path: Config file. Blank lines and ``#`` comments are ignored.

        Returns:
            Configuration dictionary.

        Raises:
            FileNotFoundError: If the file does not exist.
            ConfigError: On malformed lines, unknown keys or bad values.
        """
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        overrides = {}
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{line_no}: expected 'key = value', got '{line}'")
                key, value = (part.strip() for part in line.split("=", 1))
                overrides[key] = value
        self.apply_overrides(overrides)
        return self._config

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        """Set several dotted keys; ``None`` values are skipped (unset CLI flags)."""
        for key, value in overrides.items():
            if value is not None:
                self.set(key, value)

    def _deep_copy_config(self, config: Dict[str, Any]) -> Dict[str, Any]:
        result = {}
        for key, value in config.items():
            if isinstance(value, dict):
                result[key] = self._deep_copy_config(value)
            elif isinstance(value, list):
                result[key] = value.copy()
            else:
                result[key] = value
        return result

    def _default_for(self, key: str) -> Any:
        section, _, name = key.partition(".")
        if section not in self.DEFAULT_CONFIG or name not in self.DEFAULT_CONFIG[section]:
            raise ConfigError(f"Unknown config key: '{key}'")
        return self.DEFAULT_CONFIG[section][name]

    def _coerce(self, key: str, value: Any) -> Any:
        """Convert ``value`` to the type of the default for ``key``."""
        default = self._default_for(key)
        try:
            if isinstance(default, bool):
                if isinstance(value, bool):
                    return value
                text = str(value).strip().lower()
                if text in ("true", "yes", "1", "on"):
                    return True
                if text in ("false", "no", "0", "off"):
                    return False
                raise ValueError(f"not a boolean: {value}")
            if isinstance(default, list):
                if isinstance(value, (list, tuple)):
                    return [int(v) for v in value]
                text = str(value).strip()
                return [int(v) for v in text.split(",") if v.strip()] if text else []
            if isinstance(default, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError(f"not an integer: {value}")
                return int(str(value).strip()) if isinstance(value, str) else int(value)
            if isinstance(default, float):
                return float(value)
            return str(value).strip()
        except ValueError as e:
            raise ConfigError(f"Invalid value for '{key}': {e}") from e

    def save(self, path: Union[str, Path]) -> Path:
        """Write the effective configuration in canonical form.

        Args:
            path: File path, or a directory to write ``config.txt`` into.

        Returns:
            The written file path.
        """
        path = Path(path)
        if path.is_dir():
            path = path / self.CONFIG_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.canonical_text())
        return path

    def canonical_text(self) -> str:
        lines = []
        for section in sorted(self._config):
            for name in sorted(self._config[section]):
                lines.append(f"{section}.{name} = {self._format(self._config[section][name])}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def _format(value: Any) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, list):
            return ",".join(str(v) for v in value)
        if isinstance(value, float):
            return repr(value)
        return str(value)

    def fingerprint(self) -> str:
        """SHA-256 of the canonical configuration text."""
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def get(self, key: str, default: Any = None) -> Any:
        """Get a configuration value.

        Args:
            key: Dotted key, e.g. 'loss.m'.
            default: Default value if key not found.

        Returns:
            Configuration value or default.
        """
        keys = key.split(".")
        value = self._config
        for k in keys:
            if isinstance(value, dict):
                value = value.get(k)
                if value is None:
                    return default
            else:
                return default
        return value

    def set(self, key: str, value: Any) -> None:
        """Set a configuration value after coercing it.

        Raises:
            ConfigError: If the key is unknown or the value cannot be coerced.
        """
        section, _, name = key.partition(".")
        self._config[section][name] = self._coerce(key, value)

    def as_dict(self) -> Dict[str, Any]:
        return self._deep_copy_config(self._config)

    def validate(self) -> None:
        """Check enumerated and range-restricted values.

        Raises:
            ConfigError: On the first invalid value.
        """
        checks: List[Tuple[str, List[str]]] = [
            ("loss.kind", self.LOSS_KINDS),
            ("train.optimizer", self.OPTIMIZERS),
            ("eval.eval_logits", self.EVAL_LOGITS),
            ("train.checkpoint_dtype", self.CHECKPOINT_DTYPES),
        ]
        for key, allowed in checks:
            if self.get(key) not in allowed:
                raise ConfigError(f"'{key}' must be one of {allowed}, got '{self.get(key)}'")
        if self.get("train.learning_rate") <= 0:
            raise ConfigError("'train.learning_rate' must be positive")
        if self.get("train.epochs") < 1 or self.get("train.batches_per_epoch") < 1:
            raise ConfigError("'train.epochs' and 'train.batches_per_epoch' must be >= 1")
        if self.get("train.batch_size") < 1:
            raise ConfigError("'train.batch_size' must be >= 1")
        if not 0.0 <= self.get("eval.frame_overlap") < 1.0:
            raise ConfigError("'eval.frame_overlap' must lie in [0, 1)")
        if self.get("eval.threads") < 1:
            raise ConfigError("'eval.threads' must be >= 1")
        conv = [self.get(f"model.conv_{k}") for k in ("filters", "kernels", "pools")]
        if len({len(c) for c in conv}) != 1:
            raise ConfigError("model.conv_filters, conv_kernels and conv_pools must have equal length")
        if self.get("data.train_min_s") > self.get("data.train_max_s"):
            raise ConfigError("'data.train_min_s' exceeds 'data.train_max_s'")
        if self.get("data.test_min_s") > self.get("data.test_max_s"):
            raise ConfigError("'data.test_min_s' exceeds 'data.test_max_s'")

    def chunk_len(self) -> int:
        """Chunk length in samples for the configured sample rate."""
        return int(round(self.get("data.sample_rate") * self.get("data.chunk_ms") / 1000.0))

    def is_logging_enabled(self) -> bool:
        return bool(self.get("logging.enabled", False))

    def to_model_config(self, sample_rate: Optional[int] = None):
        """Build the trunk architecture (optionally for a manifest's sample rate)."""
        if sample_rate is not None and sample_rate != self.get("data.sample_rate"):
            self.set("data.sample_rate", sample_rate)
        conv = list(
            zip(
                self.get("model.conv_filters"),
                self.get("model.conv_kernels"),
                self.get("model.conv_pools"),
            )
        )
        config = ModelConfig(
            sample_rate=self.get("data.sample_rate"),
            chunk_len=self.chunk_len(),
            sinc_filters=self.get("sinc.filters"),
            sinc_kernel_len=self.get("sinc.kernel_len"),
            sinc_stride=self.get("sinc.stride"),
            sinc_pool=self.get("sinc.pool"),
            f_min=self.get("sinc.f_min"),
            f_max=self.get("sinc.f_max"),
            min_low_hz=self.get("sinc.min_low_hz"),
            window=self.get("sinc.window"),
            conv_layers=conv,
            fc_layers=self.get("model.fc_layers"),
            embedding_dim=self.get("model.embedding_dim"),
            leaky_slope=self.get("model.leaky_slope"),
            layer_norm_eps=self.get("model.layer_norm_eps"),
        )
        config.validate()
        return config

    def to_loss_config(self):
        config = LossConfig(**self._config["loss"])
        config.validate()
        return config

    def to_batch_spec(self):
        return BatchSpec(
            batch_size=self.get("train.batch_size"),
            chunk_len=self.chunk_len(),
            seed=self.get("train.seed"),
        )

    def to_train_config(self):
        section = self._config["train"]
        return TrainConfig(
            loss=self.to_loss_config(),
            batch=self.to_batch_spec(),
            learning_rate=section["learning_rate"],
            optimizer=section["optimizer"],
            rmsprop_decay=section["rmsprop_decay"],
            rmsprop_eps=section["rmsprop_eps"],
            epochs=section["epochs"],
            batches_per_epoch=section["batches_per_epoch"],
            seed=section["seed"],
            checkpoint_every=section["checkpoint_every"],
            prefetch=section["prefetch"],
            checkpoint_dtype=section["checkpoint_dtype"],
        )

    def split_policy(self) -> Dict[str, Any]:
        """Keyword arguments for ``data.split_by_duration``."""
        seed = self.get("data.split_seed")
        return {
            "train_target_s": (self.get("data.train_min_s"), self.get("data.train_max_s")),
            "test_target_s": (self.get("data.test_min_s"), self.get("data.test_max_s")),
            "seed": None if seed < 0 else seed,
        }
