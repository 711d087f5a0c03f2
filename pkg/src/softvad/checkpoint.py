"""Versioned model checkpoints.

A checkpoint is a ``torch.save`` dict::

    {"format_version": 1, "config": {...}, "models": {name: entry}, "extra": {...}}

where each entry records the model class, its constructor config, every
tensor shape, and the tensors themselves (floating point stored as float32).
A combined SV + VAD checkpoint simply holds both entries.
"""

from pathlib import Path

import torch

from softvad.embedder import SpeakerModel
from softvad.vad import VadNet

FORMAT_VERSION = 1
_KINDS = {"VadNet": VadNet, "SpeakerModel": SpeakerModel}


def _entry(model):
    state = {k: (v.detach().to(torch.float32) if v.is_floating_point() else v.detach()).clone()
             for k, v in model.state_dict().items()}
    return {"kind": type(model).__name__, "config": model.config(),
            "shapes": {k: list(v.shape) for k, v in state.items()}, "state": state}


def save(path, models: dict, config=None, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format_version": FORMAT_VERSION, "config": config or {},
               "models": {name: _entry(m) for name, m in models.items() if m is not None},
               "extra": extra or {}}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: not a softvad checkpoint (format_version "
                         f"{payload.get('format_version') if isinstance(payload, dict) else None})")
    for name, entry in payload["models"].items():
        for k, shape in entry["shapes"].items():
            if list(entry["state"][k].shape) != shape:
                raise ValueError(f"{path}: tensor {name}.{k} does not match its recorded shape")
    return payload


def build(entry, dtype=torch.float32):
    cls = _KINDS[entry["kind"]]
    model = cls(**entry["config"])
    model.load_state_dict(entry["state"])
    return model.to(dtype)


def load_model(path, name, dtype=torch.float32):
    payload = load(path)
    if name not in payload["models"]:
        raise KeyError(f"{path}: no {name!r} model (has {sorted(payload['models'])})")
    return build(payload["models"][name], dtype)


def fingerprint(model):
    """Stable hash of a model's parameters and buffers."""
    import hashlib
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]
