"""
Run configuration: loading, validation, defaults and the config hash embedded in
every report.
"""
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

from codec.model import ModelConfig
from codec.train import TrainConfig
from draq.finetune import DraqConfig
from validation.validators import validate_run_config

logger = logging.getLogger("lic-quant.storage.config")

load_dotenv()

OUT_DIR = os.getenv("LIC_QUANT_OUT_DIR", "runs")
DEFAULT_SEED = int(os.getenv("LIC_QUANT_DEFAULT_SEED", 0))


class ConfigError(Exception):
    """Raised when a run configuration cannot be read or fails validation."""

    def __init__(self, message: str, reasons: list[str] | None = None) -> None:
        super().__init__(message if not reasons else f"{message}: {'; '.join(reasons)}")
        self.reasons = reasons or []


@dataclass
class TrainingSection:
    lambdas: list[float]
    lr: float = 1e-4
    batch: int = 8
    crop: int = 16
    iters: int = 1000
    seed: int = DEFAULT_SEED
    log_every: int = 50

    def train_config(self, lmbda: float, iters: int | None = None) -> TrainConfig:
        return TrainConfig(lmbda=lmbda, lr=self.lr, batch=self.batch, crop=self.crop,
                           iters=self.iters if iters is None else iters, seed=self.seed, log_every=self.log_every)


@dataclass
class DraqSection:
    alpha: float = 0.001
    reg_strength: float = 1e-3
    recalib_period: int | None = None
    k_override: float | None = None
    bits: int = 8
    finetune_iters: int = 300
    clip_activations: bool = True
    regularize_weights: bool = True

    def draq_config(self) -> DraqConfig:
        return DraqConfig(alpha=self.alpha, k_override=self.k_override, reg_strength=self.reg_strength,
                          recalib_period=self.recalib_period, clip_activations=self.clip_activations,
                          regularize_weights=self.regularize_weights, bits=self.bits)


@dataclass
class SearchSection:
    eps: float = 0.01
    floor_bits: int = 2
    start_bits: int = 16
    order: str = "by_sensitivity"
    probe_bits: int = 6
    finetune_iters: int = 300
    budget: float | None = None


@dataclass
class SlimmingSection:
    eta: float = 0.01
    epsilon_p: float = 1e-4
    iters: int = 300


@dataclass
class DatasetSection:
    path: str | None = None
    synthetic: dict[str, int] | None = None
    eval_images: int = 4


@dataclass
class RunConfig:
    model: ModelConfig
    training: TrainingSection
    draq: DraqSection = field(default_factory=DraqSection)
    search: SearchSection = field(default_factory=SearchSection)
    slimming: SlimmingSection = field(default_factory=SlimmingSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    output_dir: str = OUT_DIR

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        """
        Build a validated RunConfig from parsed JSON.

        :raises: ConfigError listing every invalid field.
        """
        valid, reasons = validate_run_config(data)
        if not valid:
            raise ConfigError("invalid run configuration", reasons)
        training = TrainingSection(**data["training"])
        return cls(
            model=ModelConfig(**{"seed": training.seed, **data.get("model", {})}),
            training=training,
            draq=DraqSection(**data.get("draq", {})),
            search=SearchSection(**data.get("search", {})),
            slimming=SlimmingSection(**data.get("slimming", {})),
            dataset=DatasetSection(**data["dataset"]),
            output_dir=data.get("output_dir", OUT_DIR),
        )

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["model"].pop("seed")
        return data

    def with_seed(self, seed: int) -> "RunConfig":
        """A copy whose training and model initialization use ``seed``."""
        data = self.to_dict()
        data["training"]["seed"] = seed
        return RunConfig.from_dict(data)

    def config_hash(self) -> str:
        """Hex SHA-256 of the canonical JSON form (sorted keys, no whitespace)."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def seed(self) -> int:
        return self.training.seed


def load_run_config(path: str | Path) -> RunConfig:
    """
    Read and validate a JSON run configuration.

    :param path: Path to the JSON file.
    :return: The configuration.
    :rtype: RunConfig

    :raises: ConfigError when the file is missing, is not JSON or fails validation.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"configuration file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"configuration file {path} is not valid JSON (line {e.lineno}, column {e.colno})") from e
    config = RunConfig.from_dict(data)
    logger.info(f"Loaded configuration {path} (hash {config.config_hash()[:12]})")
    return config
