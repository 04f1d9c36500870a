"""Binary checkpoint container.

Layout (little-endian)::

    b"SIAMAF1" | u16 version | u8 kind (0 full, 1 inference-only) | 64-byte hex config digest
    | u32 len + JSON metadata (configs, epoch, extras)
    | u32 count, then per parameter: u16 len + name, u8 ndim, u32 dims..., f4 values
    | u32 count, then per buffer (batch-norm running statistics): same record layout
    | u32 count, then per optimizer-state array: same record layout
    | 32-byte sha256 over everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data.dataset import _atomic_write
from .model import COMPONENTS_FULL, COMPONENTS_INFERENCE, EncoderConfig, HeadConfig, SiamAFModel, build_model

MAGIC = b"SIAMAF1"
FORMAT_VERSION = 1
KIND_FULL, KIND_INFERENCE = 0, 1


class CheckpointError(ValueError):
    pass


def _pack_arrays(items) -> bytes:
    items = list(items)
    out = [struct.pack("<I", len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def arrays(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode()
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I")
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(self.take(4 * size), "<f4").reshape(shape).astype(np.float32)
        return out


def model_state(model: SiamAFModel) -> dict[str, dict[str, np.ndarray]]:
    """Copies of parameters, buffers and optimizer state keyed by name."""
    params = {p.name: p.data.copy() for p in model.parameters()}
    buffers = {n: b.copy() for n, b in model.named_buffers()}
    opt = {f"{p.name}|{k}": np.asarray(v, dtype=np.float32).copy()
           for p in model.parameters() for k, v in sorted(p.state.items())}
    return {"params": params, "buffers": buffers, "optimizer": opt}


def load_state(model: SiamAFModel, state: dict, strict: bool = True) -> SiamAFModel:
    params = dict(model.named_parameters())
    by_name = {p.name: p for p in params.values()}
    missing = set(by_name) - set(state["params"])
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)[:3]}...")
    for name, arr in state["params"].items():
        if name not in by_name:
            raise CheckpointError(f"unexpected parameter {name!r}")
        p = by_name[name]
        if p.data.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != model {p.data.shape}")
        p.data[...] = arr
        p.grad = None
        p.state = {}
    bufs = dict(model.named_buffers())
    for name, arr in state["buffers"].items():
        if name in bufs:
            bufs[name][...] = arr
        elif strict:
            raise CheckpointError(f"unexpected buffer {name!r}")
    for key, arr in state.get("optimizer", {}).items():
        name, _, slot = key.partition("|")
        if name in by_name:
            by_name[name].state[slot] = arr.copy() if slot != "t" else np.asarray(int(arr.reshape(-1)[0]))
    return model


def encode_checkpoint(model: SiamAFModel, inference_only: bool = False, meta: dict | None = None) -> bytes:
    full = not inference_only and model.components == COMPONENTS_FULL
    kind = KIND_FULL if full else KIND_INFERENCE
    state = model_state(model)
    keep = COMPONENTS_FULL if full else COMPONENTS_INFERENCE

    def kept(d):
        return sorted((k, v) for k, v in d.items() if k.split(".", 1)[0] in keep)

    header = {"encoder": asdict(model.enc_cfg), "heads": asdict(model.head_cfg),
              "components": list(keep), **(meta or {})}
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join([
        MAGIC, struct.pack("<HB", FORMAT_VERSION, kind), model.digest.encode("ascii"),
        struct.pack("<I", len(blob)), blob,
        _pack_arrays(kept(state["params"])), _pack_arrays(kept(state["buffers"])),
        _pack_arrays(kept(state["optimizer"]) if full else []),
    ])
    return payload + hashlib.sha256(payload).digest()


def save_checkpoint(model: SiamAFModel, path, inference_only: bool = False, meta: dict | None = None) -> Path:
    path = Path(path)
    _atomic_write(path, encode_checkpoint(model, inference_only, meta))
    return path


def decode_checkpoint(buf: bytes):
    if len(buf) < len(MAGIC) + 32 or not buf.startswith(MAGIC):
        raise CheckpointError("not a SIAMAF1 checkpoint")
    payload, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt or truncated")
    r = _Reader(payload)
    r.take(len(MAGIC))
    version, kind = r.unpack("<HB")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg_digest = r.take(64).decode("ascii")
    (n,) = r.unpack("<I")
    header = json.loads(r.take(n))
    state = {"params": r.arrays(), "buffers": r.arrays(), "optimizer": r.arrays()}
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes in checkpoint")
    return kind, cfg_digest, header, state


def load_checkpoint(path, with_meta: bool = False):
    """Rebuild the model stored at ``path``; optionally also return its header."""
    kind, cfg_digest, header, state = decode_checkpoint(Path(path).read_bytes())
    enc = EncoderConfig(**header["encoder"])
    heads = HeadConfig(**header["heads"])
    comps = COMPONENTS_FULL if kind == KIND_FULL else COMPONENTS_INFERENCE
    model = build_model(enc, heads, seed=0, components=comps)
    if model.digest != cfg_digest:
        raise CheckpointError("config digest does not match the stored configuration")
    load_state(model, state)
    model.eval()
    header["kind"] = "full" if kind == KIND_FULL else "inference"
    return (model, header) if with_meta else model


def require_resumable(path) -> None:
    kind, *_ = decode_checkpoint(Path(path).read_bytes())
    if kind != KIND_FULL:
        raise CheckpointError(
            f"{path} is an inference-only checkpoint (encoder and classifier); "
            "joint training needs the projector and predictor too")
