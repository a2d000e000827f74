"""Checkpoint files: named tensors with a version header (safetensors, little-endian)."""
import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from app.core.config import RunConfig
from app.core.errors import InputError
from app.numerics import ParameterSet

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    parameter_version: int
    config: Optional[RunConfig] = None
    metadata: dict[str, str] = field(default_factory=dict)

    def parameters(self, prefix: str = "params.") -> ParameterSet:
        return ParameterSet(
            {name[len(prefix):]: t for name, t in self.tensors.items() if name.startswith(prefix)},
            self.parameter_version,
        )


def save_checkpoint(
    path: str | Path,
    tensors: Mapping[str, torch.Tensor],
    parameter_version: int = 0,
    config: Optional[RunConfig] = None,
) -> Path:
    """Write named tensors with format/parameter version and optional run config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {
        "format_version": FORMAT_VERSION,
        "parameter_version": str(parameter_version),
    }
    if config is not None:
        metadata["config"] = config.model_dump_json(by_alias=True)

    save_file({name: t.detach().contiguous().clone() for name, t in tensors.items()}, str(path), metadata=metadata)
    logger.info(f"Saved checkpoint {path} (version {parameter_version}, {len(tensors)} tensors)")
    return path


def save_parameters(path: str | Path, params: ParameterSet, config: Optional[RunConfig] = None) -> Path:
    return save_checkpoint(path, {f"params.{n}": t for n, t in params.tensors.items()}, params.version, config)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        InputError: If the file is missing or its header is not understood
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"Checkpoint not found: {path}")

    with safe_open(str(path), framework="pt") as handle:
        metadata = dict(handle.metadata() or {})
        tensors = {name: handle.get_tensor(name) for name in handle.keys()}

    if metadata.get("format_version") != FORMAT_VERSION:
        raise InputError(f"Unsupported checkpoint format: {metadata.get('format_version')!r}")

    config = None
    if "config" in metadata:
        config = RunConfig.model_validate(json.loads(metadata["config"]))

    return Checkpoint(
        tensors=tensors,
        parameter_version=int(metadata.get("parameter_version", 0)),
        config=config,
        metadata=metadata,
    )
