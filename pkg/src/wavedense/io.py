"""Grayscale image files and binary checkpoints.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"WDNSCKPT"
    u32       format version
    u32       header length in bytes
    header    UTF-8 JSON: configs, progress, RNG state, tensor table, payload CRC32
    payload   concatenated little-endian float32 arrays, offsets per the table
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import ModelConfig, ParamStore, network_for
from .tensor import RunningStats

MAGIC = b"WDNSCKPT"
VERSION = 1
IMAGE_SUFFIXES = (".pgm", ".png")


class ImageFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class GrayImage:
    pixels: np.ndarray  # float64 in [0, 1], shape (h, w)
    bit_depth: int = 8

    @property
    def shape(self):
        return self.pixels.shape


# ---------------------------------------------------------------- images

def _pgm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the header.
    """
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"PGM header truncated at byte offset {pos}")
        tokens.append((data[start:pos], start))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise ImageFormatError(f"PGM header not terminated by whitespace at byte offset {pos}")
    return tokens, pos


def decode_pgm(data: bytes) -> GrayImage:
    if data[:2] != b"P5":
        raise ImageFormatError(f"not a binary PGM: magic {data[:2]!r} at byte offset 0")
    tokens, end = _pgm_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        bad = next((off for t, off in tokens[1:] if not t.isdigit()), 2)
        raise ImageFormatError(f"non-numeric PGM header field at byte offset {bad}") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"invalid PGM header values w={width} h={height} maxval={maxval}")
    start = end + 1
    itemsize = 1 if maxval < 256 else 2
    need = width * height * itemsize
    if len(data) - start < need:
        raise ImageFormatError(
            f"PGM payload truncated: expected {need} bytes from offset {start}, file ends at {len(data)}"
        )
    raw = np.frombuffer(data, dtype=np.uint8 if itemsize == 1 else ">u2", count=width * height, offset=start)
    pixels = raw.reshape(height, width).astype(np.float64) / maxval
    if pixels.max() > 1.0:
        raise ImageFormatError(f"PGM sample exceeds maxval {maxval}")
    return GrayImage(pixels, 8 if itemsize == 1 else 16)


def encode_pgm(pixels: np.ndarray) -> bytes:
    q = quantize(pixels)
    h, w = q.shape
    return b"P5\n%d %d\n255\n" % (w, h) + q.tobytes()


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path) -> GrayImage:
    """Load a grayscale image; PGM (P5) natively, PNG and others through Pillow."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P5":
        return decode_pgm(data)
    if path.suffix.lower() == ".pgm":
        raise ImageFormatError(f"{path}: not a binary PGM (magic {data[:2]!r} at byte offset 0)")
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64)
                return GrayImage(np.clip(arr / 65535.0, 0, 1), 16)
            if im.mode not in ("L", "P", "1"):
                # ITU-R BT.601 luma
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
                luma = rgb @ np.array([0.299, 0.587, 0.114])
                return GrayImage(luma / 255.0, 8)
            return GrayImage(np.asarray(im.convert("L"), dtype=np.float64) / 255.0, 8)
    except (UnidentifiedImageError, OSError) as e:
        raise ImageFormatError(f"{path}: cannot decode image ({e})") from e


def save_image(path, pixels: np.ndarray) -> None:
    """Write 8-bit grayscale; PGM for ``.pgm``, otherwise Pillow picks by suffix."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        _atomic_write(path, encode_pgm(pixels))
        return
    from PIL import Image

    Image.fromarray(quantize(pixels), mode="L").save(path)


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"not a directory: {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_folder(folder):
    """Load every image in ``folder`` sorted by name.

    Returns ``(images, failures)`` where ``images`` is a list of
    ``(name, pixels)`` and ``failures`` a list of ``(name, reason)``.
    """
    images, failures = [], []
    for p in list_images(folder):
        try:
            images.append((p.name, load_image(p).pixels))
        except (ImageFormatError, OSError) as e:
            failures.append((p.name, str(e)))
    return images, failures


# ----------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: ParamStore
    epoch: int = 0
    step: int = 0
    rng_state: dict | None = None
    train_config: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def _tensor_groups(params: ParamStore):
    for name, v in params.values.items():
        yield name, "value", v
    for name, v in params.adam_m.items():
        yield name, "adam_m", v
    for name, v in params.adam_v.items():
        yield name, "adam_v", v
    for name, s in params.stats.items():
        yield name, "bn_mean", s.mean
        yield name, "bn_var", s.var


def encode_checkpoint(cp: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    for name, group, arr in _tensor_groups(cp.params):
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "group": group, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = {
        "model_config": cp.params.config.to_dict(),
        "train_config": cp.train_config,
        "epoch": cp.epoch,
        "step": cp.step,
        "rng_state": cp.rng_state,
        "bn_counts": {k: s.count for k, s in cp.params.stats.items()},
        "extra": cp.extra,
        "tensors": table,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + payload


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    if len(data) < 16 + hlen:
        raise CheckpointError(f"checkpoint truncated inside header ({len(data)} bytes)")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    payload = data[16 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"checkpoint payload is {len(payload)} bytes, header declares {header['payload_bytes']}"
        )
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError("checkpoint payload checksum mismatch")

    config = ModelConfig.from_dict(header["model_config"])
    shapes = network_for(config).param_shapes()
    params = ParamStore(config)
    means, vars_ = {}, {}
    seen = set()
    for entry in header["tensors"]:
        name, group, shape = entry["name"], entry["group"], tuple(entry["shape"])
        if (name, group) in seen:
            raise CheckpointError(f"duplicate tensor {name}/{group}")
        seen.add((name, group))
        count = int(np.prod(shape)) if shape else 1
        if entry["nbytes"] != 4 * count or entry["offset"] + entry["nbytes"] > len(payload):
            raise CheckpointError(f"tensor {name}/{group}: shape {shape} inconsistent with byte range")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        arr = arr.astype(np.float32).reshape(shape)
        if group in ("value", "adam_m", "adam_v"):
            if shapes.get(name) != shape:
                raise CheckpointError(
                    f"tensor {name}: stored shape {shape} does not match model shape {shapes.get(name)}"
                )
            {"value": params.values, "adam_m": params.adam_m, "adam_v": params.adam_v}[group][name] = arr
        elif group == "bn_mean":
            means[name] = arr
        elif group == "bn_var":
            vars_[name] = arr
        else:
            raise CheckpointError(f"unknown tensor group {group!r}")
    for d, label in ((params.values, "value"), (params.adam_m, "adam_m"), (params.adam_v, "adam_v")):
        missing = [k for k in shapes if k not in d]
        if missing:
            raise CheckpointError(f"checkpoint lacks {label} tensors: {missing[:3]}")
        ordered = OrderedDict((k, d[k]) for k in shapes)
        d.clear()
        d.update(ordered)
    expected_stats = network_for(config).stat_names()
    for name in expected_stats:
        if name not in means or name not in vars_:
            raise CheckpointError(f"checkpoint lacks batch-norm statistics for {name}")
        params.stats[name] = RunningStats(means[name], vars_[name], int(header["bn_counts"][name]))
    return Checkpoint(params, int(header["epoch"]), int(header["step"]), header["rng_state"],
                      header["train_config"], header.get("extra") or {})


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, cp: Checkpoint) -> None:
    _atomic_write(Path(path), encode_checkpoint(cp))


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` refuse one built for a different architecture."""
    cp = decode_checkpoint(Path(path).read_bytes())
    if expect is not None and expect != cp.config:
        raise CheckpointError("checkpoint model config differs from the requested one: "
                              + "; ".join(cp.config.diff(expect)))
    return cp
