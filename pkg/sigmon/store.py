"""Versioned, checksummed object files and atomic writes."""
import hashlib
import json
import logging
import os
import pathlib
import tempfile
from typing import Any, Tuple, Union
import zlib

from sigmon.base import ModelVersionError, ParseError, zlib_read
from sigmon.model import MODEL_VERSION, TrainedModel


_LOG = logging.getLogger('sigmon.store')

PathLike = Union[str, pathlib.Path]

DIGEST_LEN = 20


def atomic_write(path: PathLike, data: bytes) -> None:
    """Write data to a temporary file next to path, then rename it over path."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, str(path))
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    _LOG.debug(f"wrote {path} ({len(data)} bytes)")


def canonical_json(payload: Any) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(',', ':')).encode()


def object_serialize(fmt: bytes, version: int, payload: Any) -> bytes:
    data = canonical_json(payload)
    # header layout: <fmt> <version> <len>\x00<payload>
    result = fmt + b' ' + str(version).encode() + b' ' + str(len(data)).encode() + b'\x00' + data
    return zlib.compress(result + hashlib.sha1(result).digest())


def object_parse(raw: bytes, path: str, fmt: bytes, version: int) -> Any:
    if len(raw) <= DIGEST_LEN:
        raise ParseError(path, "truncated object")
    body, digest = raw[:-DIGEST_LEN], raw[-DIGEST_LEN:]
    if hashlib.sha1(body).digest() != digest:
        raise ParseError(path, "checksum mismatch")
    x = body.find(b' ')
    y = body.find(b' ', x + 1)
    z = body.find(b'\x00', y + 1)
    if min(x, y, z) < 0:
        raise ParseError(path, "malformed header")
    if body[:x] != fmt:
        raise ParseError(path, f"expected a {fmt.decode()} object, found {body[:x].decode(errors='replace')}")
    found = int(body[x + 1:y].decode("ascii"))
    if found != version:
        raise ModelVersionError(f"{path}: object version {found}, this build reads version {version}")
    size = int(body[y + 1:z].decode("ascii"))
    if size != len(body) - z - 1:
        raise ParseError(path, "bad length")
    try:
        return json.loads(body[z + 1:].decode())
    except ValueError as exc:
        raise ParseError(path, f"bad payload: {exc}")


def model_write(path: PathLike, model: TrainedModel, config_hash: str = '', seed: int = 0) -> str:
    payload = {"model": model.to_dict(), "config_hash": config_hash, "seed": seed}
    data = object_serialize(b'sigmon-model', MODEL_VERSION, payload)
    atomic_write(path, data)
    digest = hashlib.sha1(data).hexdigest()
    _LOG.info(f"model written to {path} ({digest[:12]})")
    return digest


def model_read_with_provenance(path: PathLike) -> Tuple[TrainedModel, str, int]:
    try:
        raw = zlib_read(pathlib.Path(path))
    except zlib.error as exc:
        raise ParseError(str(path), f"not a compressed model file: {exc}")
    payload = object_parse(raw, str(path), b'sigmon-model', MODEL_VERSION)
    try:
        model = TrainedModel.from_dict(payload["model"])
    except (KeyError, TypeError) as exc:
        raise ParseError(str(path), f"incomplete model: {exc}")
    return model, payload.get("config_hash", ''), payload.get("seed", 0)


def model_read(path: PathLike) -> TrainedModel:
    return model_read_with_provenance(path)[0]
