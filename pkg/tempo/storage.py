# SPDX-License-Identifier: Apache-2.0
"""
File helpers — the binary tensor format, checkpoint archives, the JSON
manifest and JSON-lines detections.  Every failure surfaces as a DataError
naming the path (and the field, when there is one).
"""

from __future__ import annotations

import json
import logging
import struct
import zipfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Generator, Iterable, Mapping

import numpy as np
from pydantic import ValidationError

from tempo.errors import DataError
from tempo.models import Detection, Manifest
from tempo.tensor import Tensor

logger = logging.getLogger("tempo.storage")

MAGIC = b"TNSR"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sBBB")


# ------------------------------------------------------------------ #
#  Tensor files
# ------------------------------------------------------------------ #

def encode_tensor(t: Tensor) -> bytes:
    data = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
    code = _DTYPE_CODES[np.dtype(data.dtype)]
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    return _HEADER.pack(MAGIC, VERSION, code, t.ndim) + dims + data.tobytes(order="C")


def decode_tensor(blob: bytes, source: str = "<bytes>") -> Tensor:
    if len(blob) < _HEADER.size:
        raise DataError(source, "truncated tensor header", field="header")
    magic, version, code, rank = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(source, f"bad magic {magic!r}", field="magic")
    if version != VERSION:
        raise DataError(source, f"unsupported version {version}", field="version")
    if code not in _CODE_DTYPES:
        raise DataError(source, f"unknown dtype code {code}", field="dtype")
    offset = _HEADER.size
    dims_size = 8 * rank
    if len(blob) < offset + dims_size:
        raise DataError(source, "truncated dimension list", field="dims")
    shape = struct.unpack_from(f"<{rank}Q", blob, offset)
    dtype = _CODE_DTYPES[code]
    payload = blob[offset + dims_size:]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise DataError(source, f"payload has {len(payload)} bytes, expected {expected}", field="payload")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return Tensor(data)


def save_tensor(path: str | Path, t: Tensor) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(t))


def load_tensor(path: str | Path) -> Tensor:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(str(path), "tensor file not found") from None
    except OSError as exc:
        raise DataError(str(path), f"cannot read tensor file: {exc}") from None
    return decode_tensor(blob, str(path))


# ------------------------------------------------------------------ #
#  Checkpoints
# ------------------------------------------------------------------ #

@contextmanager
def _open_archive(path: Path, mode: str) -> Generator[zipfile.ZipFile, None, None]:
    try:
        archive = zipfile.ZipFile(path, mode, compression=zipfile.ZIP_STORED)
    except FileNotFoundError:
        raise DataError(str(path), "checkpoint not found") from None
    except zipfile.BadZipFile as exc:
        raise DataError(str(path), f"not a checkpoint archive: {exc}") from None
    try:
        yield archive
    finally:
        archive.close()


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor], meta: Mapping[str, Any] | None = None) -> None:
    """Write named tensors plus a JSON metadata block into one archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    with _open_archive(path, "w") as archive:
        index = {name: f"tensors/{i:04d}.tnsr" for i, name in enumerate(names)}
        archive.writestr("manifest.json", json.dumps({"tensors": index}, indent=2, sort_keys=True))
        archive.writestr("meta.json", json.dumps(dict(meta or {}), indent=2, sort_keys=True, default=str))
        for name in names:
            archive.writestr(index[name], encode_tensor(params[name]))
    logger.info("Checkpoint written: %s (%d tensors)", path, len(names))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict[str, Any]]:
    path = Path(path)
    with _open_archive(path, "r") as archive:
        try:
            index = json.loads(archive.read("manifest.json"))["tensors"]
            meta = json.loads(archive.read("meta.json"))
        except KeyError as exc:
            raise DataError(str(path), f"missing archive member {exc}", field="manifest") from None
        except json.JSONDecodeError as exc:
            raise DataError(str(path), f"malformed JSON: {exc}", field="manifest") from None
        params: dict[str, Tensor] = {}
        for name, member in index.items():
            try:
                blob = archive.read(member)
            except KeyError:
                raise DataError(str(path), f"tensor member {member} missing", field=name) from None
            params[name] = Tensor(decode_tensor(blob, f"{path}:{member}").data, requires_grad=True, name=name)
    return params, meta


# ------------------------------------------------------------------ #
#  Manifest
# ------------------------------------------------------------------ #

def read_manifest(path: str | Path) -> Manifest:
    """Parse and validate a manifest; tensor files must exist."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(str(path), "manifest not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(str(path), f"malformed JSON: {exc.msg} at line {exc.lineno}") from None
    try:
        manifest = Manifest.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(p) for p in first.get("loc", ()))
        raise DataError(str(path), first.get("msg", "invalid manifest"), field=field) from None

    root = path.parent
    for i, video in enumerate(manifest.videos):
        for key in ("rgb_path", "flow_path"):
            target = root / getattr(video, key)
            if not target.is_file():
                raise DataError(str(target), "tensor file referenced by manifest is missing", field=f"videos.{i}.{key}")
    logger.info("Manifest loaded: %s (%d videos, %d classes)", path, len(manifest.videos), len(manifest.classes))
    return manifest


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")


# ------------------------------------------------------------------ #
#  Detections
# ------------------------------------------------------------------ #

def write_detections(path: str | Path, detections: Iterable[Detection]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(det.model_dump_json(exclude_defaults=True) + "\n")
            count += 1
    logger.info("Wrote %d detections to %s", count, path)
    return count


def read_detections(path: str | Path) -> list[Detection]:
    path = Path(path)
    out: list[Detection] = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError(str(path), "detections file not found") from None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            out.append(Detection.model_validate_json(line))
        except ValidationError as exc:
            first = exc.errors()[0]
            field = ".".join(str(p) for p in first.get("loc", ())) or None
            raise DataError(f"{path}:{lineno}", first.get("msg", "invalid detection"), field=field) from None
    return out
