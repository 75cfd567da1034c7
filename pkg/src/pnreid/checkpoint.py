"""Versioned parameter checkpoints with bit-exact round trips."""
from __future__ import annotations

import io
import os
import pickle
from pathlib import Path

import torch
from torch import nn

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, module: nn.Module, stage: str, step: int = 0, config_hash: str = "",
                    meta: dict | None = None, rng_state: dict | None = None) -> Path:
    """Write atomically: the target path never holds a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().clone() for k, v in module.state_dict().items()}
    payload = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "step": int(step),
        "config_hash": config_hash,
        "tensors": state,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "meta": meta or {},
        "rng_state": rng_state if rng_state is not None else {"torch": torch.get_rng_state()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (RuntimeError, EOFError, pickle.UnpicklingError, ValueError, OSError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"corrupt checkpoint {path}: missing format_version")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {path} has format version {payload['format_version']}, "
                              f"expected {FORMAT_VERSION}")
    return payload


def load_checkpoint(path, module: nn.Module, stage: str | None = None,
                    config_hash: str | None = None) -> dict:
    """Validate everything first, then copy tensors into ``module``.

    A failed load leaves ``module`` untouched.
    """
    payload = read_checkpoint(path)
    if stage is not None and payload["stage"] != stage:
        raise CheckpointError(f"checkpoint {path} holds stage {payload['stage']!r}, expected {stage!r}")
    if config_hash is not None and payload["config_hash"] != config_hash:
        raise CheckpointError(f"checkpoint {path} config hash {payload['config_hash']} != {config_hash}")
    expected = module.state_dict()
    tensors = payload["tensors"]
    for name, ref in expected.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint {path} lacks tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for tensor {name!r}: checkpoint "
                                  f"{tuple(tensors[name].shape)} vs model {tuple(ref.shape)}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise CheckpointError(f"checkpoint {path} has unexpected tensor {extra[0]!r}")
    module.load_state_dict(tensors)
    return payload
