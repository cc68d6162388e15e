"""Checkpoint directories: ``manifest.json`` plus one float32 LE file per tensor."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .dataset import NormStats
from .denoiser import DenoiserConfig, build_denoiser
from .diffusion import X0_CLIP, Controller, build_schedule
from .dynamics import SystemSpec
from .invdyn import InvDynConfig, build_invdyn
from .numerics import make_rng


class CheckpointError(ValueError):
    pass


def _tensors(ctrl: Controller) -> dict[str, torch.Tensor]:
    out = {}
    for prefix, mod in ctrl.modules().items():
        for name, t in mod.state_dict().items():
            out[f"{prefix}.{name}"] = t
    return out


def tensor_hash(ctrl: Controller) -> str:
    h = hashlib.sha256()
    for name, t in sorted(_tensors(ctrl).items()):
        h.update(name.encode())
        h.update(t.detach().numpy().astype("<f4").tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(ctrl: Controller, path, manifest: dict | None = None) -> Path:
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, t in _tensors(ctrl).items():
        arr = t.detach().numpy().astype("<f4")
        (path / "tensors" / f"{name}.bin").write_bytes(arr.tobytes())
        shapes[name] = list(arr.shape)
    meta = {
        "spec": ctrl.spec.to_dict(),
        "stats": ctrl.stats.to_dict(),
        "denoiser": ctrl.denoiser.cfg.to_dict(),
        "invdyn": None if ctrl.invdyn is None else ctrl.invdyn.cfg.to_dict(),
        "schedule": {"K": ctrl.schedule.K, "kind": ctrl.schedule.kind},
        "linear_only": ctrl.linear_only,
        "x0_clip": ctrl.x0_clip,
        "shapes": shapes,
        "checkpoint_hash": tensor_hash(ctrl),
    }
    if manifest:
        meta["run"] = manifest
    (path / "manifest.json").write_text(json.dumps(meta, indent=2, default=_jsonable))
    return path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def load_checkpoint(path) -> tuple[Controller, dict]:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise CheckpointError(f"no manifest.json in {path}")
    meta = json.loads(mf.read_text())
    rng = make_rng(0)
    dcfg = DenoiserConfig(**meta["denoiser"])
    den = build_denoiser(dcfg, rng)
    inv = None if meta["invdyn"] is None else build_invdyn(InvDynConfig(**meta["invdyn"]), rng)
    ctrl = Controller(SystemSpec.from_dict(meta["spec"]), NormStats.from_dict(meta["stats"]), den, inv,
                      build_schedule(**meta["schedule"]), bool(meta.get("linear_only", False)),
                      float(meta.get("x0_clip", X0_CLIP)))
    for prefix, mod in ctrl.modules().items():
        state = {}
        for name, t in mod.state_dict().items():
            key = f"{prefix}.{name}"
            f = path / "tensors" / f"{key}.bin"
            if not f.exists():
                raise CheckpointError(f"missing tensor file {f.name}")
            arr = np.frombuffer(f.read_bytes(), dtype="<f4")
            if arr.size != t.numel() or list(t.shape) != meta["shapes"][key]:
                raise CheckpointError(f"tensor {key}: expected {list(t.shape)}, file holds {arr.size} values")
            state[name] = torch.from_numpy(arr.astype(np.float64).reshape(t.shape))
        mod.load_state_dict(state)
    return ctrl, meta
