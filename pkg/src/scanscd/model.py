"""Full network assembly and the checkpoint file format."""

from __future__ import annotations

import hashlib
import os
import pickle
import zipfile
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn

from .backbone import TED, init_conv_weights
from .config import ModelConfig
from .errors import CheckpointError
from .objectives import ChangeHead, ScdOutputs, SemanticHead
from .scanformer import SCanFormer, init_transformer_weights

CHECKPOINT_FORMAT = "scanscd-checkpoint"
CHECKPOINT_VERSION = 1


class SCanNet(nn.Module):
    """TED backbone, optional SCanFormer head, Siamese semantic head and change head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ted = TED(cfg)
        self.scanformer = SCanFormer(cfg) if cfg.use_scanformer else None
        self.sem_head = SemanticHead(cfg.channels_v, cfg.num_classes)
        self.change_head = ChangeHead(cfg.channels_v)

    def features(self, image1, image2):
        feats = self.ted(image1, image2)
        if self.scanformer is not None:
            feats = self.scanformer(feats)
        return feats

    def forward(self, image1, image2) -> ScdOutputs:
        y1, y2, yc = self.features(image1, image2)
        return ScdOutputs(self.sem_head(y1), self.sem_head(y2), self.change_head(yc))


def build_model(cfg: ModelConfig, seed: int = 0) -> SCanNet:
    """Construct and initialise a model; the global RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SCanNet(cfg)
        init_conv_weights(model)
        init_transformer_weights(model)
    model.init_seed = seed
    return model


def parameter_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, model: SCanNet, train_state: dict | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": model.cfg.digest(),
        "model_config": model.cfg.to_flat(),
        "init_seed": int(getattr(model, "init_seed", 0)),
        "state_dict": model.state_dict(),
        "train_state": train_state,
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except (RuntimeError, OSError, EOFError, pickle.UnpicklingError, zipfile.BadZipFile,
            ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    return payload


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None):
    """Return ``(model, payload)``; refuses a file whose config hash does not match."""
    payload = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_flat(payload["model_config"])
    except Exception as exc:
        raise CheckpointError(f"{path}: bad embedded model config: {exc}") from None
    if cfg.digest() != payload.get("config_hash"):
        raise CheckpointError(f"{path}: embedded config does not match its hash")
    if expected is not None and expected.digest() != payload["config_hash"]:
        raise CheckpointError(f"{path}: config hash {payload['config_hash']} does not match "
                              f"expected {expected.digest()}")
    model = build_model(cfg, payload.get("init_seed", 0))
    try:
        model.load_state_dict(payload["state_dict"])
    except (RuntimeError, KeyError) as exc:
        raise CheckpointError(f"{path}: parameter mismatch: {exc}") from None
    return model, payload
