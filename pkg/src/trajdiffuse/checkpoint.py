"""Versioned binary checkpoint for the denoiser model and its schedule.

Layout:
    bytes 0..3   magic b"TDIF"
    bytes 4..7   format version, little-endian uint32
    bytes 8..15  header length H, little-endian uint64
    H bytes      JSON header (hyperparameters, schedule parameters, RNG
                 generator kind, and the array manifest: ordered
                 (name, shape) entries)
    rest         the manifest arrays back to back, little-endian float64

Array order: schedule betas, codec mean, codec components, codec explained
variance, latent whitening scale, then every network parameter in
named_parameters() order. Loading validates the magic, version and every
shape before touching the model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserModel, ModelConfig
from .mathutils import PcaCodec, RngStream
from .schedule import NoiseSchedule

__all__ = ["save_checkpoint", "load_checkpoint", "checkpoint_sha256", "FORMAT_VERSION"]

MAGIC = b"TDIF"
FORMAT_VERSION = 1


def _model_arrays(model: DenoiserModel, sched: NoiseSchedule):
    arrays = [
        ("schedule.beta", sched.beta),
        ("codec.mean", model.codec.mean),
        ("codec.components", model.codec.components),
        ("codec.explained_variance", model.codec.explained_variance),
        ("latent_scale", model.latent_scale),
    ]
    for name, param in model.named_parameters():
        arrays.append((f"net.{name}", param.detach().numpy()))
    return arrays


def save_checkpoint(model: DenoiserModel, sched: NoiseSchedule, path) -> None:
    arrays = _model_arrays(model, sched)
    header = {
        "format_version": FORMAT_VERSION,
        "model": {
            "k": model.config.k,
            "hidden": model.config.hidden,
            "layers": model.config.layers,
            "time_embed_dim": model.config.time_embed_dim,
            "init_seed": model.init_seed,
        },
        "schedule": sched.serializable_params(),
        "rng_kind": RngStream.GENERATOR_KIND,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[DenoiserModel, NoiseSchedule]:
    """Rebuild the model and schedule; raises ValueError on any mismatch."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))

    offset = 16 + hlen
    loaded = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated array section at {entry['name']}")
        loaded[entry["name"]] = np.frombuffer(
            raw[offset:end], dtype="<f8"
        ).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")

    sp = header["schedule"]
    sched = NoiseSchedule(
        beta=loaded["schedule.beta"], gamma=sp["gamma"], kind=sp["kind"]
    )
    if sched.T != sp["T"]:
        raise ValueError(f"{path}: schedule length {sched.T} != header T {sp['T']}")

    codec = PcaCodec(
        mean=loaded["codec.mean"],
        components=loaded["codec.components"],
        explained_variance=loaded["codec.explained_variance"],
    )
    mp = header["model"]
    config = ModelConfig(
        k=mp["k"], hidden=mp["hidden"], layers=mp["layers"],
        time_embed_dim=mp["time_embed_dim"],
    )
    model = DenoiserModel(
        config, codec, loaded["latent_scale"], seed=mp["init_seed"]
    )
    with torch.no_grad():
        for name, param in model.named_parameters():
            key = f"net.{name}"
            if key not in loaded:
                raise ValueError(f"{path}: missing parameter {key}")
            if tuple(param.shape) != loaded[key].shape:
                raise ValueError(
                    f"{path}: shape mismatch for {key}: "
                    f"{tuple(param.shape)} != {loaded[key].shape}"
                )
            param.copy_(torch.from_numpy(loaded[key]))
    return model, sched


def checkpoint_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
