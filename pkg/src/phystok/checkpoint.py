"""Checkpoint container: named tensors plus a JSON metadata record.

A checkpoint is a directory holding ``tensors.pt`` (flat name -> tensor
map, loaded with ``weights_only=True``) and ``meta.json``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


def _flatten(prefix: str, obj, out: dict, meta_out):
    """Split nested optimiser state into tensors and a JSON skeleton."""
    if isinstance(obj, torch.Tensor):
        out[prefix] = obj.detach().cpu().clone()
        return {"__tensor__": prefix}
    if isinstance(obj, dict):
        return {"__dict__": [[_key(k), _flatten(f"{prefix}/{k}", v, out, meta_out)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return {"__list__": [_flatten(f"{prefix}/{i}", v, out, meta_out) for i, v in enumerate(obj)]}
    return obj


def _key(k):
    return {"int": k} if isinstance(k, int) else k


def _unflatten(obj, tensors: dict):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        if "__dict__" in obj:
            return {(k["int"] if isinstance(k, dict) else k): _unflatten(v, tensors) for k, v in obj["__dict__"]}
        if "__list__" in obj:
            return [_unflatten(v, tensors) for v in obj["__list__"]]
    return obj


def rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.default_rng()
    gen.bit_generator.state = state
    return gen


def save_checkpoint(
    path,
    model: torch.nn.Module,
    *,
    step: int,
    config: dict,
    optimiser: torch.optim.Optimizer | None = None,
    rng_states: dict | None = None,
    trainable: dict[str, bool] | None = None,
    extra: dict | None = None,
):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {f"model/{k}": v.detach().cpu().clone() for k, v in model.state_dict().items()}
    opt_skeleton = None
    if optimiser is not None:
        opt_skeleton = _flatten("optim", optimiser.state_dict(), tensors, None)
    tensors["rng/torch"] = torch.get_rng_state()
    meta = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "config": config,
        "rng": rng_states or {},
        "trainable": trainable,
        "optimiser": opt_skeleton,
        "extra": extra or {},
    }
    torch.save(tensors, path / "tensors.pt")
    (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_meta(path) -> dict:
    path = Path(path)
    if not (path / "meta.json").exists() or not (path / "tensors.pt").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    meta = json.loads((path / "meta.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {meta.get('format_version')} != supported {FORMAT_VERSION}"
        )
    return meta


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``."""
    meta = read_meta(path)
    tensors = torch.load(Path(path) / "tensors.pt", weights_only=True)
    return tensors, meta


def model_state(tensors: dict, prefix: str = "") -> dict:
    """Model parameters, optionally restricted to a submodule prefix."""
    full = f"model/{prefix}"
    return {k[len(full):]: v for k, v in tensors.items() if k.startswith(full)}


def load_into(module: torch.nn.Module, state: dict):
    """Strict load with a shape diff on mismatch."""
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    shapes = [f"{k}: checkpoint {tuple(state[k].shape)} vs model {tuple(own[k].shape)}"
              for k in sorted(set(own) & set(state)) if state[k].shape != own[k].shape]
    if missing or unexpected or shapes:
        lines = [f"missing: {k}" for k in missing] + [f"unexpected: {k}" for k in unexpected] + shapes
        raise IncompatibleCheckpointError("checkpoint incompatible with config:\n  " + "\n  ".join(lines))
    module.load_state_dict(state)


def optimiser_state(tensors: dict, meta: dict):
    if meta.get("optimiser") is None:
        return None
    return _unflatten(meta["optimiser"], tensors)
