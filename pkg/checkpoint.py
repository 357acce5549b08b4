#!/usr/bin/env python3
"""
Checkpoint container

An uncompressed zip archive with fixed member timestamps:
- metadata.yaml: model config, optimizer hyperparameters, step, seed, run config echo
- params/<name>.etsr: parameters (ETSR version 2, float64)
- optimizer/m/<name>.etsr, optimizer/v/<name>.etsr: Adam moments

Members are written in sorted order, so saving the same state twice gives the
same bytes and load-then-save reproduces the file exactly.
"""

import io
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union

import yaml

from network import EmambaIR, ModelConfig
from optimizer import OptimizerState
from tensor_engine import Tensor
from tensor_io import decode_tensor, encode_tensor
from validation_utils import ErrorHandler, FileValidator, ValidationError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def _corrupt(path: Path, reason: str) -> ValidationError:
    return ValidationError(
        f"Corrupt checkpoint {path}: {reason}",
        error_code="MALFORMED_CHECKPOINT",
        category=ValidationError.FILE_ERROR,
        suggestions=["Re-run training to regenerate the checkpoint"]
    )


@dataclass
class Checkpoint:
    params: Dict[str, Tensor]
    model_config: ModelConfig
    optimizer: OptimizerState
    step: int
    seed: int
    run_config: Dict = field(default_factory=dict)

    def metadata(self) -> Dict:
        return {
            "format_version": FORMAT_VERSION,
            "step": int(self.step),
            "seed": int(self.seed),
            "model": self.model_config.to_dict(),
            "optimizer": self.optimizer.hyperparameters(),
            "run_config": self.run_config,
            "parameters": sorted(self.params),
        }

    def to_bytes(self) -> bytes:
        buffer = io.BytesIO()
        with zipfile.ZipFile(buffer, "w", zipfile.ZIP_STORED) as archive:
            archive.writestr(_member("metadata.yaml"),
                             yaml.safe_dump(self.metadata(), sort_keys=True, default_flow_style=False))
            for name in sorted(self.params):
                archive.writestr(_member(f"params/{name}.etsr"), encode_tensor(self.params[name], version=2))
            for prefix, moments in (("m", self.optimizer.first_moment), ("v", self.optimizer.second_moment)):
                for name in sorted(moments):
                    archive.writestr(_member(f"optimizer/{prefix}/{name}.etsr"),
                                     encode_tensor(moments[name], version=2))
        return buffer.getvalue()

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(self.to_bytes())
        except OSError as e:
            raise ValidationError(ErrorHandler.handle_file_error(e, path, "saving checkpoint"),
                                  error_code="CHECKPOINT_WRITE_FAILED", category=ValidationError.FILE_ERROR)
        logger.info(f"💾 Saved checkpoint {path} (step {self.step}, {len(self.params)} tensors)")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        path = FileValidator.validate_input_file(path, kind="checkpoint")
        try:
            with zipfile.ZipFile(path) as archive:
                members = {name: archive.read(name) for name in archive.namelist()}
        except zipfile.BadZipFile as e:
            raise _corrupt(path, str(e))
        except OSError as e:
            raise ValidationError(ErrorHandler.handle_file_error(e, path, "loading checkpoint"),
                                  error_code="CHECKPOINT_READ_FAILED", category=ValidationError.FILE_ERROR)

        if "metadata.yaml" not in members:
            raise _corrupt(path, "metadata.yaml missing")
        try:
            meta = yaml.safe_load(members["metadata.yaml"])
        except yaml.YAMLError as e:
            raise _corrupt(path, f"metadata.yaml unreadable ({e})")

        def tensors(prefix: str) -> Dict[str, Tensor]:
            found = {}
            for name, payload in members.items():
                if name.startswith(prefix) and name.endswith(".etsr"):
                    key = name[len(prefix):-len(".etsr")]
                    found[key] = Tensor(decode_tensor(payload, source=f"{path}:{name}"), requires_grad=True)
            return found

        params = tensors("params/")
        if sorted(params) != list(meta.get("parameters", [])):
            raise _corrupt(path, "parameter list does not match metadata")
        hyper = dict(meta["optimizer"])
        optimizer = OptimizerState(
            **hyper,
            first_moment={k: t.data for k, t in tensors("optimizer/m/").items()},
            second_moment={k: t.data for k, t in tensors("optimizer/v/").items()},
        )
        return cls(params=params, model_config=ModelConfig.from_dict(meta["model"]), optimizer=optimizer,
                   step=int(meta["step"]), seed=int(meta["seed"]), run_config=meta.get("run_config") or {})

    def build_model(self) -> EmambaIR:
        """Instantiate the recorded architecture and bind the stored parameters."""
        model = EmambaIR(self.model_config, seed=self.seed)
        try:
            model.load_parameters(self.params)
        except ValidationError as e:
            raise ValidationError(
                f"Checkpoint does not match its own model config: {e.args[0]}",
                error_code="INCOMPATIBLE_CHECKPOINT",
                category=ValidationError.CONFIG_ERROR,
                suggestions=["The checkpoint was produced by a different architecture version"]
            )
        return model
