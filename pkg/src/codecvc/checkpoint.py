"""Single-file checkpoints.

The container is safetensors (little-endian raw tensors behind a JSON
header). The header metadata key ``codecvc`` holds a JSON document with
the format version, model configuration, training config and step; it is
validated before any tensor is touched. Tensor names:

    model.<param name>              model weights
    optim.<param index>.<field>     optimizer state tensors
    rng.torch                       torch global RNG state
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .model import ModelConfig, VoiceCloneLM

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model: VoiceCloneLM
    step: int
    meta: dict
    optimizer_state: dict | None = None
    rng_state: torch.Tensor | None = None


def save_checkpoint(path, model: VoiceCloneLM, step: int = 0, optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None) -> None:
    tensors = {f"model.{k}": v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    meta = {"format_version": FORMAT_VERSION, "model": model.config.to_dict(), "step": int(step),
            "extra": extra or {}}
    if optimizer is not None:
        sd = optimizer.state_dict()
        scalars = {}
        for idx, st in sd["state"].items():
            for key, val in st.items():
                if torch.is_tensor(val):
                    tensors[f"optim.{idx}.{key}"] = val.detach().contiguous().clone()
                else:
                    scalars[f"{idx}.{key}"] = val
        meta["optimizer"] = {"param_groups": sd["param_groups"], "scalars": scalars}
    tensors["rng.torch"] = torch.get_rng_state()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        save_file(tensors, tmp, metadata={"codecvc": json.dumps(meta, sort_keys=True)})
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_meta(path) -> dict:
    """Header metadata only; raises on a missing file, corrupt header or version mismatch."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as fh:
            raw = (fh.metadata() or {}).get("codecvc")
    except Exception as exc:  # safetensors raises several error types for bad headers
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if raw is None:
        raise CheckpointError(f"{path} is not a codecvc checkpoint")
    meta = json.loads(raw)
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {meta.get('format_version')} != supported {FORMAT_VERSION}")
    return meta


def load_checkpoint(path, with_optimizer: bool = True) -> Checkpoint:
    meta = read_meta(path)
    model = VoiceCloneLM(ModelConfig.from_dict(meta["model"]))
    state, optim_tensors, rng = {}, {}, None
    with safe_open(str(path), framework="pt") as fh:
        for name in fh.keys():
            if name.startswith("model."):
                state[name[len("model."):]] = fh.get_tensor(name)
            elif name.startswith("optim.") and with_optimizer:
                optim_tensors[name[len("optim."):]] = fh.get_tensor(name)
            elif name == "rng.torch":
                rng = fh.get_tensor(name)
    model.load_state_dict(state)
    opt_state = None
    if with_optimizer and "optimizer" in meta:
        per_param: dict[int, dict] = {}
        for key, val in optim_tensors.items():
            idx, field = key.split(".", 1)
            per_param.setdefault(int(idx), {})[field] = val
        for key, val in meta["optimizer"]["scalars"].items():
            idx, field = key.split(".", 1)
            per_param.setdefault(int(idx), {})[field] = val
        opt_state = {"state": per_param, "param_groups": meta["optimizer"]["param_groups"]}
    return Checkpoint(model, int(meta["step"]), meta, opt_state, rng)
