"""
Configuration settings for the HeadMask toolkit
Process-wide Settings plus the per-run RunConfig read from key=value files
"""

from contextvars import ContextVar
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, Union

from pydantic import Field, field_validator
from pydantic.fields import FieldInfo
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from service import keyvalue
from service.errors import ConfigurationError, UsageError
from service.importance import resolve_mask_count
from service.model import ModelConfig
from service.tasks import ParallelCorpus, gen_copy_task, gen_reversal_task, load_tsv_corpus
from service.training import TrainConfig, TrainVariant

ENV_PREFIX = "HEADMASK_"
RESOLVED_CONFIG_NAME = "resolved_config.txt"
TASKS = ("reversal", "copy", "tsv")


class Settings(BaseSettings):
    """Process settings with environment variable support"""

    # Logging
    log_level: str = "info"

    # Outputs
    output_dir: str = "runs"

    # Performance
    prefetch_batches: int = 2
    jobs: int = 1

    model_config = SettingsConfigDict(env_prefix=ENV_PREFIX, env_file=".env", case_sensitive=False, extra="ignore")


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Get process settings"""
    return settings


# Run configuration

_config_file: ContextVar[Optional[Path]] = ContextVar("headmask_config_file", default=None)


class KeyValueFileSource(PydanticBaseSettingsSource):
    """Settings source reading a flat key=value run file; unknown keys are rejected"""

    def __init__(self, settings_cls: Type[BaseSettings], path: Optional[Path]):
        super().__init__(settings_cls)
        self.path = path
        self.entries = keyvalue.read_file(path) if path else {}
        unknown = sorted(set(self.entries) - set(settings_cls.model_fields))
        if unknown:
            raise ConfigurationError(f"{path}: unknown config keys {', '.join(unknown)}")

    def get_field_value(self, field: FieldInfo, field_name: str) -> Tuple[Any, str, bool]:
        return self.entries.get(field_name), field_name, False

    def __call__(self) -> Dict[str, Any]:
        return {key: (None if value == "" else value) for key, value in self.entries.items()}


class RunConfig(BaseSettings):
    """
    Everything one run needs: task, model shape, training and outputs

    Values resolve from CLI overrides, then HEADMASK_* environment
    variables, then the key=value config file, then these defaults.
    """

    # Task
    task: str = "reversal"
    data_path: Optional[str] = None
    vocab_size: int = 64
    task_min_len: int = 5
    task_max_len: int = 12
    n_pairs: int = 20000

    # Model
    layers: int = 2
    heads_per_layer: int = 4
    d_model: int = 64
    d_ff: int = 128
    dropout: float = 0.1
    max_len: int = 64
    rescale_heads: bool = False

    # Training
    variant: TrainVariant = TrainVariant.BASELINE
    mask_n: Union[int, str] = "12.5%"
    max_steps: int = 3000
    batch_size: int = 64
    warmup_steps: int = 400
    lr_factor: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    label_smoothing: float = 0.1
    eval_every: int = 250
    log_every: int = 100
    dev_eval_limit: Optional[int] = 500
    seed: int = Field(default=1, ge=0)

    # Analysis
    num_groups: int = 8
    jobs: int = 1

    # Outputs
    out_dir: Optional[str] = None

    model_config = SettingsConfigDict(env_prefix=ENV_PREFIX, case_sensitive=False, extra="forbid")

    @field_validator("task")
    @classmethod
    def _known_task(cls, value: str) -> str:
        if value not in TASKS:
            raise ValueError(f"task must be one of {', '.join(TASKS)}")
        return value

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        return init_settings, env_settings, KeyValueFileSource(settings_cls, _config_file.get())

    def to_model_config(self, corpus: ParallelCorpus) -> ModelConfig:
        """Model shape with vocabulary sizes taken from ``corpus``"""
        return ModelConfig(
            layers=self.layers,
            heads_per_layer=self.heads_per_layer,
            d_model=self.d_model,
            d_ff=self.d_ff,
            vocab_src=len(corpus.src_vocab),
            vocab_tgt=len(corpus.tgt_vocab),
            dropout=self.dropout,
            max_len=self.max_len,
            rescale_heads=self.rescale_heads,
        )

    @property
    def total_heads(self) -> int:
        return 3 * self.layers * self.heads_per_layer

    def to_train_config(self, prefetch_batches: int = 0) -> TrainConfig:
        """Training settings with ``mask_n`` resolved against the head count"""
        mask_n = 0 if self.variant == TrainVariant.BASELINE else resolve_mask_count(self.mask_n, self.total_heads)
        return TrainConfig(
            variant=self.variant,
            mask_n=mask_n,
            max_steps=self.max_steps,
            batch_size=self.batch_size,
            warmup_steps=self.warmup_steps,
            lr_factor=self.lr_factor,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            label_smoothing=self.label_smoothing,
            eval_every=self.eval_every,
            log_every=self.log_every,
            dev_eval_limit=self.dev_eval_limit,
            prefetch_batches=prefetch_batches,
            seed=self.seed,
        )

    def build_corpus(self) -> ParallelCorpus:
        """Generate or load the corpus this run trains and evaluates on"""
        if self.task == "tsv":
            if not self.data_path:
                raise UsageError("task=tsv needs data_path")
            return load_tsv_corpus(self.data_path)
        generator = gen_reversal_task if self.task == "reversal" else gen_copy_task
        return generator(self.vocab_size, (self.task_min_len, self.task_max_len), self.n_pairs,
                         seed=self.seed, max_len=self.max_len)

    def write_resolved(self, directory: Union[str, Path]) -> Path:
        """Write every resolved field to ``directory/resolved_config.txt``"""
        return keyvalue.write_file(Path(directory) / RESOLVED_CONFIG_NAME, self.model_dump())


def load_run_config(path: Optional[Union[str, Path]] = None, **overrides: Any) -> RunConfig:
    """
    Resolve a RunConfig

    Args:
        path: Optional key=value config file
        **overrides: CLI values; None entries are ignored

    Returns:
        RunConfig
    """
    token = _config_file.set(Path(path) if path else None)
    try:
        return RunConfig(**{k: v for k, v in overrides.items() if v is not None})
    finally:
        _config_file.reset(token)
