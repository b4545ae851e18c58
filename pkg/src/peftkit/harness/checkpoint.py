"""Checkpoint and merged-weight files.

Both use a JSON manifest next to a raw payload of little-endian float64
tensors. The manifest lists every tensor's name, shape, byte offset and byte
length, and records SHA-256 digests of the config and the payload.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import adapters as ad
from ..errors import IntegrityError, VersionError
from ..linalg import Rng
from .config import TrainConfig
from .session import TrainSession

CHECKPOINT_FORMAT = "peftkit.checkpoint"
MERGED_FORMAT = "peftkit.merged"
FORMAT_VERSION = 1


@dataclass
class Bundle:
    manifest: dict
    tensors: dict[str, np.ndarray]


def _payload_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix(".bin")


def write_bundle(path, manifest: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    payload_path = _payload_path(path)
    manifest = dict(manifest, tensors=entries, payload=payload_path.name,
                    payload_sha256=hashlib.sha256(payload).hexdigest())
    payload_path.write_bytes(payload)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_bundle(path, expected_format: str) -> Bundle:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != expected_format:
        raise VersionError(f"{path}: expected format {expected_format!r}, found {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported version {manifest.get('version')!r} "
                           f"(this build reads version {FORMAT_VERSION})")
    payload = (path.parent / manifest["payload"]).read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise IntegrityError(f"{path}: payload digest mismatch")
    tensors = {}
    for entry in manifest["tensors"]:
        count = entry["nbytes"] // 8
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    return Bundle(manifest, tensors)


def _config_from(manifest: dict) -> TrainConfig:
    config = TrainConfig.from_dict(manifest["config"])
    if config.config_hash() != manifest.get("config_hash"):
        raise IntegrityError("config does not match its recorded hash (edited or corrupted)")
    return config


def save_checkpoint(session: TrainSession, path) -> Path:
    opt = session.opt
    tensors = {}
    layers = []
    for i, layer in enumerate(session.model.layers):
        tensors[f"frozen.{i}.w"] = layer.base.w
        layers.append({"kind": layer.kind.value, "scaling": layer.factors.scaling,
                       "dropout_p": layer.dropout_p, "rank": layer.r})
    for name, p in session.model.params().items():
        tensors[f"param.{name}"] = p
    for name in opt.exp_avg:
        tensors[f"opt.exp_avg.{name}"] = opt.exp_avg[name]
        tensors[f"opt.exp_avg_sq.{name}"] = opt.exp_avg_sq[name]
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "config": session.config.to_dict(),
        "config_hash": session.config.config_hash(),
        "step": session.step,
        "loss": session.model.loss,
        "layers": layers,
        "rng_state": str(session.dropout_rng.get_state()),
        "optimizer": {
            "kind": opt.kind.value, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "weight_decay": opt.weight_decay, "step_count": opt.step_count,
            "param_steps": dict(opt.param_steps),
        },
    }
    return write_bundle(path, manifest, tensors)


def load_checkpoint(path) -> Bundle:
    bundle = read_bundle(path, CHECKPOINT_FORMAT)
    _config_from(bundle.manifest)
    return bundle


def restore_session(path) -> TrainSession:
    """Rebuild a session from its config, then overwrite all mutable state."""
    bundle = load_checkpoint(path)
    m = bundle.manifest
    session = TrainSession(_config_from(m))
    t = bundle.tensors
    for i, layer in enumerate(session.model.layers):
        if not np.array_equal(layer.base.w, t[f"frozen.{i}.w"]):
            raise IntegrityError(f"frozen base of layer {i} differs from the regenerated one")
    for name, p in session.model.params().items():
        p[...] = t[f"param.{name}"]
    opt = session.opt
    o = m["optimizer"]
    opt.step_count = o["step_count"]
    opt.param_steps = {k: int(v) for k, v in o["param_steps"].items()}
    for name in list(opt.exp_avg):
        opt.exp_avg[name] = t[f"opt.exp_avg.{name}"].copy()
        opt.exp_avg_sq[name] = t[f"opt.exp_avg_sq.{name}"].copy()
    session.dropout_rng = Rng.from_state(int(m["rng_state"]))
    session.step = m["step"]
    return session


def layers_from_checkpoint(bundle: Bundle) -> list[ad.AdapterState]:
    """Adapter states straight from stored tensors (no data regeneration)."""
    t = bundle.tensors
    states = []
    for i, info in enumerate(bundle.manifest["layers"]):
        kind = ad.Kind.parse(info["kind"])
        base = ad.FrozenBase.from_weight(t[f"frozen.{i}.w"])
        factors = ad.LowRankFactors(t[f"param.{i}.a"].copy(), t[f"param.{i}.b"].copy(), info["scaling"])
        map_params = dora_params = None
        if kind is ad.Kind.MAP:
            map_params = ad.MapParams.create(t[f"param.{i}.alpha"], t[f"param.{i}.beta"])
        if kind is ad.Kind.DORA:
            dora_params = ad.DoraParams(t[f"param.{i}.mags"].copy())
        states.append(ad.AdapterState(kind, base, factors, map_params, dora_params, info["dropout_p"]))
    return states


def cmd_merge(checkpoint_path, out_path) -> list[np.ndarray]:
    bundle = load_checkpoint(checkpoint_path)
    merged = [ad.merge(s) for s in layers_from_checkpoint(bundle)]
    m = bundle.manifest
    manifest = {
        "format": MERGED_FORMAT,
        "version": FORMAT_VERSION,
        "config_hash": m["config_hash"],
        "source_step": m["step"],
        "layers": [{"kind": info["kind"]} for info in m["layers"]],
    }
    write_bundle(out_path, manifest, {f"{i}.w_eff": w for i, w in enumerate(merged)})
    return merged


def load_merged(path) -> list[np.ndarray]:
    bundle = read_bundle(path, MERGED_FORMAT)
    return [bundle.tensors[f"{i}.w_eff"] for i in range(len(bundle.manifest["layers"]))]
