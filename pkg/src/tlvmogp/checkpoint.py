"""Bit-exact model checkpoints.

File layout: one header line ``TLVMOGP-CHECKPOINT <version> sha256=<hex>``
followed by a JSON document. Every float is written with ``float.hex`` so a
round trip reproduces parameters bit for bit; the checksum covers the JSON
bytes and is verified before anything is parsed.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch

from .config import TrainConfig
from .diffmath import DTYPE
from .svgp import TLVMOGP

MAGIC = "TLVMOGP-CHECKPOINT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class ModelCheckpoint:
    model: TLVMOGP
    config: TrainConfig
    input_ids: list[str]
    output_ids: list[str]

    def output_index(self) -> dict[str, int]:
        return {oid: i for i, oid in enumerate(self.output_ids)}

    def save(self, path: str) -> None:
        save_checkpoint(path, self)


def _encode(t: torch.Tensor) -> dict:
    arr = t.detach().cpu().numpy()
    if arr.dtype == np.float64:
        data = [float(v).hex() for v in arr.ravel()]
    else:
        data = [int(v) for v in arr.ravel()]
    return {"shape": list(arr.shape), "dtype": str(arr.dtype), "data": data}


def _decode(entry: dict) -> torch.Tensor:
    shape = tuple(entry["shape"])
    if entry["dtype"] == "float64":
        arr = np.array([float.fromhex(v) for v in entry["data"]], dtype=np.float64)
        return torch.as_tensor(arr.reshape(shape), dtype=DTYPE)
    return torch.as_tensor(np.array(entry["data"], dtype=entry["dtype"]).reshape(shape))


def save_checkpoint(path: str, ckpt: ModelCheckpoint) -> None:
    model = ckpt.model
    payload = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "input_ids": ckpt.input_ids,
        "output_ids": ckpt.output_ids,
        "n_train": model.n_train,
        "whiten": model.inducing.whiten,
        "state": {k: _encode(v) for k, v in model.state_dict().items()},
    }
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    digest = hashlib.sha256(body).hexdigest()
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {FORMAT_VERSION} sha256={digest}\n".encode("ascii"))
        fh.write(body)


def load_checkpoint(path: str) -> ModelCheckpoint:
    from .data import Dataset
    from .trainer import model_from_config

    with open(path, "rb") as fh:
        raw = fh.read()
    head, sep, body = raw.partition(b"\n")
    try:
        magic, version, digest = head.decode("ascii").split(" ")
        version = int(version)
    except (UnicodeDecodeError, ValueError):
        raise CheckpointError(f"{path}: malformed checkpoint header") from None
    if magic != MAGIC or not digest.startswith("sha256="):
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if hashlib.sha256(body).hexdigest() != digest[len("sha256="):]:
        raise ChecksumError(f"{path}: checksum mismatch")
    payload = json.loads(body.decode("utf-8"))
    if payload.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: payload version {payload.get('format_version')}")

    cfg = TrainConfig(**payload["config"])
    state = {k: _decode(v) for k, v in payload["state"].items()}
    X = state["X"].numpy()
    P = len(payload["output_ids"])
    prior_mean = state["latent.prior_mean"].numpy() if cfg.latent_dim else None
    n_inducing = state["inducing.Z"].shape[0]
    skeleton = Dataset(X, payload["input_ids"], payload["output_ids"],
                       np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0),
                       prior_mean)
    # placeholder observations only feed inducing initialisation, which the state overwrites
    skeleton.n = np.zeros(1, dtype=np.int64)
    skeleton.p = np.zeros(1, dtype=np.int64)
    skeleton.y = np.zeros(1)
    model = model_from_config(skeleton, cfg.with_overrides({"n_inducing": n_inducing,
                                                             "whiten": payload["whiten"]}))
    model.load_state_dict(state, strict=True)
    model.n_train = payload["n_train"]
    model.eval()
    return ModelCheckpoint(model=model, config=cfg, input_ids=payload["input_ids"],
                           output_ids=payload["output_ids"])
