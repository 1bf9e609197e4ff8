"""Binary checkpoint (``AFRN``) and template (``AFRT``) files, and the gallery directory.

Everything is little-endian.  Checkpoint layout::

    b"AFRN" u16 version  u32 len  config-json
    u32 n_tensors
    n x { u16 len name  u8 rank  rank x u32 dim  prod(dims) x f32 }

Template layout::

    b"AFRT" u16 version  u32 embed_dim  u32 local_dim  u32 grid  u32 flags
    3 x { u16 len  8-bit text }            subject, finger, model fingerprint
    embed_dim x f32 z_c   embed_dim x f32 z_a
    if flags & HAS_LOCALS:
        grid^2 * local_dim x f32 descriptors   grid^2 * 2 x f32 keypoints
        u32 h  u32 w  ceil(h*w/8) bytes packed foreground mask
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .matcher import Template
from .model import AFRNet, ModelConfig

CKPT_MAGIC = b"AFRN"
CKPT_VERSION = 1
TMPL_MAGIC = b"AFRT"
TMPL_VERSION = 1
HAS_LOCALS = 1


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals if len(vals) > 1 else vals[0]

    def text(self) -> str:
        return self.take(self.unpack("H")).decode("latin-1")

    def f32(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)


def _text(s: str) -> bytes:
    b = s.encode("latin-1")
    if len(b) > 0xFFFF:
        raise FormatError("label too long")
    return struct.pack("<H", len(b)) + b


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


# ---------------------------------------------------------------------------
# Checkpoints


def state_to_bytes(cfg: ModelConfig, state: dict) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    cj = cfg.to_json().encode()
    out += [struct.pack("<I", len(cj)), cj, struct.pack("<I", len(state))]
    for name, t in state.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        nb = name.encode()
        out += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                struct.pack(f"<{arr.ndim}I", *arr.shape), _f32(arr)]
    return b"".join(out)


def bytes_to_state(data: bytes):
    r = _Reader(data)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("not an AFRN checkpoint")
    if r.unpack("H") != CKPT_VERSION:
        raise FormatError("unsupported checkpoint version")
    cfg = ModelConfig.from_json(r.take(r.unpack("I")).decode())
    state = {}
    for _ in range(r.unpack("I")):
        name = r.take(r.unpack("H")).decode()
        rank = r.unpack("B")
        dims = r.unpack(f"{rank}I") if rank else ()
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        state[name] = r.f32(int(np.prod(dims))).reshape(dims)
    return cfg, state


def save_checkpoint(model: AFRNet, path) -> None:
    data = state_to_bytes(model.cfg, model.state_dict())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> AFRNet:
    with open(path, "rb") as fh:
        cfg, state = bytes_to_state(fh.read())
    model = AFRNet(cfg)
    ref = model.state_dict()
    missing = set(ref) ^ set(state)
    if missing:
        raise FormatError(f"checkpoint tensors do not match the model: {sorted(missing)[:5]}")
    model.load_state_dict({k: torch.from_numpy(v.copy()).to(ref[k].dtype) for k, v in state.items()})
    return model.eval()


# ---------------------------------------------------------------------------
# Templates


def template_to_bytes(t: Template, grid: int) -> bytes:
    d = len(t.z_c)
    local_dim = t.descriptors.shape[1] if t.has_locals else 0
    flags = HAS_LOCALS if t.has_locals else 0
    out = [TMPL_MAGIC, struct.pack("<HIIII", TMPL_VERSION, d, local_dim, grid, flags),
           _text(t.subject), _text(t.finger), _text(t.model_fingerprint), _f32(t.z_c), _f32(t.z_a)]
    if t.has_locals:
        if t.descriptors.shape[0] != grid * grid:
            raise FormatError("descriptor count must equal grid^2")
        h, w = t.fg.shape
        out += [_f32(t.descriptors), _f32(t.keypoints), struct.pack("<II", h, w),
                np.packbits(t.fg.astype(bool).ravel()).tobytes()]
    return b"".join(out)


def bytes_to_template(data: bytes) -> Template:
    r = _Reader(data)
    if r.take(4) != TMPL_MAGIC:
        raise FormatError("not an AFRT template")
    version, d, local_dim, grid, flags = r.unpack("HIIII")
    if version != TMPL_VERSION:
        raise FormatError("unsupported template version")
    subject, finger, fp = r.text(), r.text(), r.text()
    t = Template(subject, finger, r.f32(d), r.f32(d), fp)
    if flags & HAS_LOCALS:
        n = grid * grid
        t.descriptors = r.f32(n * local_dim).reshape(n, local_dim)
        t.keypoints = r.f32(n * 2).reshape(n, 2)
        h, w = r.unpack("II")
        bits = np.frombuffer(r.take((h * w + 7) // 8), dtype=np.uint8)
        t.fg = np.unpackbits(bits)[:h * w].reshape(h, w).astype(bool)
    if r.pos != len(data):
        raise FormatError("trailing bytes in template")
    return t


def save_template(t: Template, path, grid: int) -> None:
    Path(path).write_bytes(template_to_bytes(t, grid))


def load_template(path) -> Template:
    return bytes_to_template(Path(path).read_bytes())


def save_gallery(templates: Sequence[Template], directory, grid: int) -> Path:
    """Write ``NNNNNN.afrt`` files plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, t in enumerate(templates):
        name = f"{i:06d}.afrt"
        save_template(t, directory / name, grid)
        entries.append({"index": i, "subject": t.subject, "finger": t.finger, "file": name})
    fps = sorted({t.model_fingerprint for t in templates})
    manifest = {"model_fingerprint": fps[0] if len(fps) == 1 else fps, "templates": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_gallery(directory) -> list[Template]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    entries = sorted(manifest["templates"], key=lambda e: e["index"])
    out = []
    for e in entries:
        t = load_template(directory / e["file"])
        if (t.subject, t.finger) != (e["subject"], e["finger"]):
            raise FormatError(f"manifest labels disagree with {e['file']}")
        out.append(t)
    return out
