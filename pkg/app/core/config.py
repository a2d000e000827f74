from pathlib import Path
from typing import Annotated, Any, Literal, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigurationError


class Settings(BaseSettings):
    """Process-level settings using Pydantic v2 BaseSettings"""

    # Project
    PROJECT_NAME: str = "CoBERL Desk"
    VERSION: str = "1.0.0"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # Runs
    OUTPUT_DIR: str = "runs"
    TORCH_THREADS: int = 1

    model_config = SettingsConfigDict(
        env_file=".env",
        case_sensitive=True,
        extra="ignore"
    )


settings = Settings()


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    """Base for run-config sections: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)


class NumericsConfig(_Section):
    dtype: Literal["float32", "float64"] = "float32"
    grad_check_step: float = Field(1e-5, gt=0)


class EncoderConfig(_Section):
    """Observation encoder; `preset` picks the residual stack layout."""

    preset: Literal["desk", "paper", "flat"] = "desk"
    d_action_reward: int = Field(16, gt=0, description="Width of the action/reward projection (d_ar)")
    mlp_hidden: int = Field(64, gt=0)


class TransformerConfig(_Section):
    n_layers: int = Field(2, ge=0)
    memory_size: int = Field(8, ge=0)
    d_model: int = Field(64, gt=0)
    n_heads: int = Field(2, gt=0)
    d_head: int = Field(32, gt=0, description="Attention size per head")
    d_ff: int = Field(256, gt=0)
    activation: Literal["gelu", "relu"] = "gelu"
    gate_bias: float = 2.0

    @field_validator("d_model")
    @classmethod
    def _even_width(cls, value: int) -> int:
        if value % 2:
            raise ValueError("d_model must be even for sinusoidal relative positions")
        return value


class CoreConfig(_Section):
    d_lstm: int = Field(64, gt=0)
    gate: Literal["gru", "sum", "concat", "none"] = "gru"
    use_lstm: bool = True
    gate_bias: float = 2.0
    head_hidden: int = Field(64, gt=0)


class ContrastiveConfig(_Section):
    enabled: bool = True
    masking: bool = True
    loss_weight: float = Field(1.0, ge=0)
    mask_rate: float = Field(0.15, gt=0, le=1)
    kl_weight: float = Field(1.0, ge=0)
    mask_token: Literal["trainable", "zero"] = "trainable"
    d_critic: int = Field(32, gt=0)


class RLConfig(_Section):
    discount: float = Field(0.997, ge=0, le=1)
    trace_lambda: float = Field(0.8, ge=0, le=1, alias="lambda")
    value_transform: Literal["signed_sqrt", "identity"] = "signed_sqrt"
    transform_epsilon: float = Field(1e-3, gt=0)
    target_policy: Literal["max", "eps_greedy"] = "max"
    target_epsilon: float = Field(0.01, ge=0, le=1)


class OptimizerConfig(_Section):
    learning_rate: float = Field(3e-4, gt=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_epsilon: float = Field(1e-7, gt=0)
    clip_norm: float = Field(40.0, gt=0)


class ReplayConfig(_Section):
    capacity: int = Field(512, gt=0)
    batch_size: int = Field(16, gt=0)
    trace_length: int = Field(16, gt=0)
    replay_period: int = Field(8, gt=0)
    priority_exponent: float = Field(0.9, ge=0, le=1, description="eta of the max/mean mixture")
    importance_exponent: float = Field(0.6, ge=0)
    min_start: int = Field(32, gt=0)
    sampling_exponent: float = Field(1.0, ge=0)


class HarnessConfig(_Section):
    mode: Literal["deterministic", "async"] = "deterministic"
    num_actors: int = Field(4, ge=1)
    base_epsilon: float = Field(0.4, ge=0, le=1)
    epsilon_alpha: float = Field(7.0, ge=0)
    burn_in: Optional[int] = Field(None, ge=0, description="Defaults to the replay period")
    target_update_period: int = Field(400, ge=1)
    publish_interval: int = Field(10, ge=1, description="Learner steps between snapshot publications")
    learner_interval: int = Field(8, ge=1, description="Environment steps between learner steps")
    inference_batch_size: int = Field(4, ge=1)
    eval_interval: int = Field(1000, ge=1)
    eval_episodes: int = Field(5, ge=1)
    eval_epsilon: float = Field(0.01, ge=0, le=1)
    log_interval: int = Field(500, ge=1)
    total_env_steps: int = Field(200_000, ge=1)
    rl_pass_masked: bool = True
    max_consecutive_aborts: int = Field(3, ge=1)
    seed: int = 0


class EnvConfig(_Section):
    env_id: str = "cue_recall"
    obs_shape: Annotated[tuple[int, int, int], BeforeValidator(_split_csv)] = (5, 5, 3)
    horizon: int = Field(12, ge=1)
    n_cues: int = Field(4, ge=1)
    noise: float = Field(1.0, ge=0, le=1)
    n_arms: int = Field(2, ge=1)
    payouts: Annotated[tuple[float, ...], BeforeValidator(_split_csv)] = (0.0, 1.0)


class RunConfig(BaseModel):
    """Complete configuration of a training run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    numerics: NumericsConfig = NumericsConfig()
    encoder: EncoderConfig = EncoderConfig()
    transformer: TransformerConfig = TransformerConfig()
    core: CoreConfig = CoreConfig()
    contrastive: ContrastiveConfig = ContrastiveConfig()
    rl: RLConfig = RLConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    replay: ReplayConfig = ReplayConfig()
    harness: HarnessConfig = HarnessConfig()
    env: EnvConfig = EnvConfig()

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        if self.transformer.d_model <= self.encoder.d_action_reward:
            raise ValueError("transformer.d_model must exceed encoder.d_action_reward")
        if self.burn_in >= self.replay.trace_length:
            raise ValueError("burn-in must be shorter than the trace length")
        return self

    @property
    def burn_in(self) -> int:
        if self.harness.burn_in is None:
            return self.replay.replay_period
        return self.harness.burn_in

    @property
    def d_obs(self) -> int:
        return self.transformer.d_model - self.encoder.d_action_reward

    def override(self, **sections: dict[str, Any]) -> "RunConfig":
        """Return a copy with the given section fields replaced and revalidated."""
        data = self.model_dump(by_alias=True)
        for section, fields in sections.items():
            if section not in data:
                raise ConfigurationError(f"Unknown config section: {section}")
            data[section].update(fields)
        return _validate(data)

    @classmethod
    def desk(cls) -> "RunConfig":
        return cls()

    @classmethod
    def paper(cls) -> "RunConfig":
        """Sizes and hyperparameters of the full-scale R2D2 setup."""
        return cls.desk().override(
            encoder={"preset": "paper", "d_action_reward": 64, "mlp_hidden": 512},
            transformer={"n_layers": 8, "memory_size": 64, "d_model": 512, "n_heads": 8, "d_head": 64, "d_ff": 2048},
            core={"d_lstm": 512, "head_hidden": 512},
            contrastive={"d_critic": 512},
            replay={"capacity": 80_000, "batch_size": 32, "trace_length": 80, "replay_period": 40, "min_start": 5000},
            harness={"num_actors": 512, "inference_batch_size": 64},
        )

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        presets = {"desk": cls.desk, "paper": cls.paper}
        if name not in presets:
            raise ConfigurationError(f"Unknown preset '{name}' (expected one of {sorted(presets)})")
        return presets[name]()


def _validate(data: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid run configuration: {e}") from e


def load_run_config(path: str | Path) -> RunConfig:
    """
    Load a flat ``section.key=value`` run-config file.

    An optional top-level ``preset`` key selects the base preset that the
    remaining keys override.

    Raises:
        ConfigurationError: If the file is missing, or a key is unknown or invalid
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file not found: {path}")

    values = {key: value for key, value in dotenv_values(path).items() if value is not None}
    base = RunConfig.preset(values.pop("preset", "desk")).model_dump(by_alias=True)

    for key, raw in values.items():
        section, _, name = key.partition(".")
        if not name or section not in base:
            raise ConfigurationError(f"Unknown config key: {key}")
        if name not in base[section]:
            raise ConfigurationError(f"Unknown config key: {key}")
        base[section][name] = raw if raw != "" else None

    return _validate(base)
