"""Checksummed, versioned checkpoint archives."""

from __future__ import annotations

import hashlib
import io
import os
from pathlib import Path

import torch

MAGIC = b"DULDCKPT"
VERSION = 1
FINAL = "checkpoint.pt"
RESUME = "resume.pt"


class CheckpointError(RuntimeError):
    pass


class ConfigMismatch(CheckpointError):
    pass


def save_checkpoint(run_dir, stage: str, payload: dict, config_hash: str, name: str = FINAL) -> Path:
    """Write ``payload`` (state dicts, iteration, ...) under ``run_dir/stage/name``.

    Layout: magic, 2-byte version, 32-byte SHA-256 of the body, body (torch.save
    of the payload plus the config hash and the torch RNG state).
    """
    directory = Path(run_dir) / stage
    directory.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save({"config_hash": config_hash, "stage": stage, "version": VERSION,
                "torch_rng": torch.get_rng_state(), "payload": payload}, buf)
    body = buf.getvalue()
    path = directory / name
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + VERSION.to_bytes(2, "little") + hashlib.sha256(body).digest() + body)
    os.replace(tmp, path)
    return path


def load_checkpoint(run_dir, stage: str, config_hash: str | None = None, force: bool = False,
                    name: str = FINAL) -> dict:
    path = Path(run_dir) / stage / name
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    head = len(MAGIC) + 2 + 32
    if len(raw) < head or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    version = int.from_bytes(raw[len(MAGIC):len(MAGIC) + 2], "little")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest, body = raw[len(MAGIC) + 2:head], raw[head:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum failure")
    blob = torch.load(io.BytesIO(body), weights_only=False)
    if config_hash is not None and blob["config_hash"] != config_hash and not force:
        raise ConfigMismatch(f"{path}: saved with a different model configuration")
    return blob["payload"]


def has_checkpoint(run_dir, stage: str, name: str = FINAL) -> bool:
    return (Path(run_dir) / stage / name).exists()
