"""Binary checkpoints: a text manifest plus named little-endian blobs.

Layout: magic "NRCP", format version u32, a length-prefixed UTF-8 manifest
(key = value lines: the model configuration, the ladder, and anything the
caller adds, e.g. the training config echo), then a u32 blob count and one
length-prefixed named blob per tensor. Masks are never stored; they are
rebuilt from the ladder on load. Optimizer moments ride along as "opt/"
blobs so training can resume.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig, _coerce, _field_types
from .errors import FormatError
from .model import ModelParams, build_model

__all__ = ["save_checkpoint", "load_checkpoint"]

MAGIC = b"NRCP"
VERSION = 1

_DTYPE_CODES = {4: "<f4", 8: "<f8"}


def _pack_blob(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float32:
        code = 4
    elif arr.dtype == np.float64:
        code = 8
    else:
        raise ValueError(f"blob {name}: unsupported dtype {arr.dtype}")
    raw = arr.astype(_DTYPE_CODES[code], copy=False).tobytes()
    name_b = name.encode("utf-8")
    head = struct.pack("<I", len(name_b)) + name_b
    head += struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<Q", len(raw))
    return head + raw


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(
                f"{self.path}: truncated at byte {self.pos} "
                f"(needed {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_blob(r: _Reader) -> tuple[str, np.ndarray]:
    (name_len,) = r.unpack("<I")
    name = r.take(name_len).decode("utf-8")
    code, ndim = r.unpack("<BI")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{r.path}: blob {name}: unknown dtype code {code}")
    shape = r.unpack(f"<{ndim}I")
    (nbytes,) = r.unpack("<Q")
    arr = np.frombuffer(r.take(nbytes), dtype=_DTYPE_CODES[code])
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise FormatError(
            f"{r.path}: blob {name}: {arr.size} values for shape {shape}")
    return name, arr.reshape(shape).copy()


def save_checkpoint(path, params: ModelParams,
                    extra_manifest: dict | None = None,
                    opt_state=None) -> None:
    cfg = params.config
    manifest = {"format_version": VERSION}
    manifest.update(dataclasses.asdict(cfg))
    manifest["ladder"] = params.ladder.spec()
    manifest["ladder_spec"] = params.ladder.spec()
    for key, value in (extra_manifest or {}).items():
        manifest[str(key)] = value
    if opt_state is not None:
        manifest["opt_step"] = opt_state.step

    blobs = []
    for name, tensor, _ in params.named_parameters():
        blobs.append(_pack_blob(f"param/{name}", tensor.data))
    if params.fusion is not None:
        blobs.append(_pack_blob("const/features", params.fusion.features))
    if opt_state is not None:
        for name, arr in opt_state.m.items():
            blobs.append(_pack_blob(f"opt/m/{name}", arr))
        for name, arr in opt_state.v.items():
            blobs.append(_pack_blob(f"opt/v/{name}", arr))

    text = "\n".join(f"{k} = {v}" for k, v in manifest.items()).encode("utf-8")
    out = MAGIC + struct.pack("<I", VERSION)
    out += struct.pack("<Q", len(text)) + text
    out += struct.pack("<I", len(blobs)) + b"".join(blobs)
    Path(path).write_bytes(out)


def _parse_manifest(text: str, path) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}: manifest line without '=': {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, manifest dict, opt blobs).

    The model is rebuilt from the manifest configuration and every stored
    tensor replaces its freshly initialized counterpart; masks come back
    from the ladder. The third element maps optimizer blob names (without
    the "opt/" prefix) to arrays, empty when the file carries no state.
    """
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise FormatError(
            f"{path}: bad magic, expected {MAGIC!r}, found {raw[:4]!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint version {version}, "
            f"expected {VERSION}")
    (mlen,) = r.unpack("<Q")
    manifest = _parse_manifest(r.take(mlen).decode("utf-8"), path)
    (n_blobs,) = r.unpack("<I")
    blobs: dict[str, np.ndarray] = {}
    for _ in range(n_blobs):
        name, arr = _unpack_blob(r)
        blobs[name] = arr

    types = _field_types(ModelConfig)
    kwargs = {name: _coerce(name, ftype, manifest[name])
              for name, ftype in types.items() if name in manifest}
    cfg = ModelConfig(**kwargs)

    lang = img = None
    if cfg.modality_mode != "none":
        feats = blobs.get("const/features")
        if feats is None:
            raise FormatError(
                f"{path}: modality checkpoint is missing const/features")
        if cfg.modality_mode == "both":
            lang, img = feats[:, :cfg.d_lang], feats[:, cfg.d_lang:]
        elif cfg.modality_mode == "text":
            lang = feats
        else:
            img = feats
    model = build_model(cfg, lang=lang, img=img)

    for name, tensor, _ in model.named_parameters():
        key = f"param/{name}"
        if key not in blobs:
            raise FormatError(f"{path}: missing parameter blob {name}")
        arr = blobs[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise FormatError(
                f"{path}: parameter {name} has shape {arr.shape}, "
                f"model expects {tuple(tensor.shape)}")
        tensor.data = arr.astype(cfg.dtype(), copy=False)

    opt_blobs = {name[len("opt/"):]: arr for name, arr in blobs.items()
                 if name.startswith("opt/")}
    return model, manifest, opt_blobs
