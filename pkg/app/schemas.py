from typing import Optional

from pydantic import BaseModel, ConfigDict, Field


class GradCheckEntry(BaseModel):
    """Worst finite-difference disagreement for one parameter"""
    name: str
    max_relative_error: float = Field(..., ge=0)
    checked: int = Field(..., ge=0, description="Number of entries compared")


class GradCheckReport(BaseModel):
    """Result of a gradient check across a parameter set"""
    entries: list[GradCheckEntry]
    tolerance: float = Field(..., gt=0)

    @property
    def passed(self) -> bool:
        return all(e.max_relative_error <= self.tolerance for e in self.entries)

    @property
    def worst(self) -> Optional[GradCheckEntry]:
        if not self.entries:
            return None
        return max(self.entries, key=lambda e: e.max_relative_error)

    @property
    def errors(self) -> dict[str, float]:
        return {e.name: e.max_relative_error for e in self.entries}


class LearnerMetrics(BaseModel):
    """Metrics emitted by one learner step"""
    step: int = Field(..., ge=0)
    loss_total: float
    loss_rl: float
    loss_contrastive: float
    invariance_penalty: float = 0.0
    grad_norm: float = 0.0
    priority_mean: float = 0.0
    aborted: bool = False
    target_updated: bool = False


class EvaluationReport(BaseModel):
    """Mean return over a block of evaluation episodes"""
    step: int = Field(..., ge=0, description="Environment steps consumed by actors at report time")
    mean_return: float
    returns: list[float]
    parameter_version: int = 0


CSV_COLUMNS = (
    "step",
    "episode_return",
    "eval_return",
    "loss_rl",
    "loss_contrastive",
    "priority_mean",
    "epsilon_mean",
    "seed",
)


class MetricsRow(BaseModel):
    """One row of the metrics CSV; blank cells are None"""
    step: int = Field(..., ge=0)
    episode_return: Optional[float] = None
    eval_return: Optional[float] = None
    loss_rl: Optional[float] = None
    loss_contrastive: Optional[float] = None
    priority_mean: Optional[float] = None
    epsilon_mean: Optional[float] = None
    seed: Optional[int] = None

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "step": 5000,
                "episode_return": -0.25,
                "eval_return": 0.2,
                "loss_rl": 0.013,
                "loss_contrastive": 1.92,
                "priority_mean": 0.31,
                "epsilon_mean": 0.057,
                "seed": 0,
            }
        }
    )

    def to_csv(self) -> dict[str, str]:
        return {
            column: "" if getattr(self, column) is None else f"{getattr(self, column)}"
            for column in CSV_COLUMNS
        }


class SeedSummary(BaseModel):
    """Final-window statistics for one seed"""
    seed: str
    final_mean: float
    n_reports: int = Field(..., ge=1)
    auc: Optional[float] = None
    auc_above_threshold: Optional[float] = None


class RunSummary(BaseModel):
    """Summary across seeds: final-window mean with standard error, and AUC"""
    final_mean: float
    final_stderr: float = Field(..., ge=0)
    auc_mean: Optional[float] = None
    threshold: Optional[float] = None
    auc_above_threshold_mean: Optional[float] = None
    seeds: list[SeedSummary]

    def to_key_values(self) -> str:
        lines = [
            f"final_mean={self.final_mean}",
            f"final_stderr={self.final_stderr}",
            f"auc_mean={'' if self.auc_mean is None else self.auc_mean}",
            f"n_seeds={len(self.seeds)}",
        ]
        if self.threshold is not None:
            lines.append(f"threshold={self.threshold}")
            lines.append(f"auc_above_threshold_mean={self.auc_above_threshold_mean}")
        for s in self.seeds:
            lines.append(f"seed.{s.seed}.final_mean={s.final_mean}")
            lines.append(f"seed.{s.seed}.auc={'' if s.auc is None else s.auc}")
        return "\n".join(lines)

    def to_text(self) -> str:
        lines = [
            f"Final-window eval return: {self.final_mean:.4f} ± {self.final_stderr:.4f} "
            f"over {len(self.seeds)} seed(s)",
        ]
        if self.auc_mean is not None:
            lines.append(f"Mean AUC: {self.auc_mean:.4f}")
        if self.threshold is not None and self.auc_above_threshold_mean is not None:
            lines.append(f"Mean AUC above {self.threshold}: {self.auc_above_threshold_mean:.4f}")
        for s in self.seeds:
            auc = "n/a" if s.auc is None else f"{s.auc:.4f}"
            lines.append(f"  seed {s.seed}: final={s.final_mean:.4f} reports={s.n_reports} auc={auc}")
        return "\n".join(lines)
