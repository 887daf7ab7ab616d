"""
Binary LogFile codec, plain-JSON prediction import and JSON label files.

LogFile layout (all little-endian):

    magic     4s   b"EPLG"
    version   u16
    N E T C   4 x u32
    flags     u16  bit 0: soft predictions present
    width     u8   bytes per hard prediction (1, 2, 4 or 8)
    E x (num u32, den u32)   checkpoint rationals
    payload   hard [N x E x T] unsigned of `width`, then soft [N x E x T x C] f32
    crc32     u32  over the payload only
"""

import struct
import zlib
import logging
from fractions import Fraction

import numpy as np

from library.config import LOG_MAGIC, LOG_FORMAT_VERSION, LOG_FLAG_HAS_SOFT
from library.core import PredictionLog, LabelSet
from library.errors import (InputError, BadMagicError, UnsupportedVersionError, ChecksumError,
                            DimensionMismatchError)
from library.manifest import atomic_write, canonical_json, read_json

logger = logging.getLogger(__name__)

_PREAMBLE = struct.Struct("<4sH")
_HEADER = struct.Struct("<IIIIHB")
_CHECKPOINT = struct.Struct("<II")
_CRC = struct.Struct("<I")
_U32_MAX = 0xFFFFFFFF


def encode_log(log):
    n, e, t = log.hard_preds.shape
    hard = np.ascontiguousarray(log.hard_preds, dtype=log.hard_preds.dtype.newbyteorder("<"))
    flags = LOG_FLAG_HAS_SOFT if log.has_soft else 0

    parts = [_PREAMBLE.pack(LOG_MAGIC, LOG_FORMAT_VERSION),
             _HEADER.pack(n, e, t, log.num_classes, flags, hard.dtype.itemsize)]
    for checkpoint in log.checkpoints:
        if checkpoint < 0 or checkpoint.numerator > _U32_MAX or checkpoint.denominator > _U32_MAX:
            raise InputError(f"checkpoint {checkpoint} does not fit the u32 rational encoding")
        parts.append(_CHECKPOINT.pack(checkpoint.numerator, checkpoint.denominator))

    payload = hard.tobytes()
    if log.has_soft:
        payload += np.ascontiguousarray(log.soft_preds, dtype="<f4").tobytes()
    parts.append(payload)
    parts.append(_CRC.pack(zlib.crc32(payload) & _U32_MAX))
    return b"".join(parts)


def decode_log(data):
    if len(data) < _PREAMBLE.size:
        raise DimensionMismatchError(f"file is {len(data)} bytes, too short for a LogFile")
    magic, version = _PREAMBLE.unpack_from(data, 0)
    if magic != LOG_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {LOG_MAGIC!r}")
    if version != LOG_FORMAT_VERSION:
        raise UnsupportedVersionError(f"LogFile version {version} is not supported "
                                      f"(this build reads version {LOG_FORMAT_VERSION})")
    offset = _PREAMBLE.size
    if len(data) < offset + _HEADER.size:
        raise DimensionMismatchError("file ends inside the header")
    n, e, t, c, flags, width = _HEADER.unpack_from(data, offset)
    offset += _HEADER.size
    if width not in (1, 2, 4, 8):
        raise DimensionMismatchError(f"hard prediction width {width} is not 1, 2, 4 or 8 bytes")

    if len(data) < offset + e * _CHECKPOINT.size:
        raise DimensionMismatchError("file ends inside the checkpoint table")
    checkpoints = []
    for _ in range(e):
        num, den = _CHECKPOINT.unpack_from(data, offset)
        offset += _CHECKPOINT.size
        if den == 0:
            raise DimensionMismatchError("checkpoint with zero denominator")
        checkpoints.append(Fraction(num, den))

    has_soft = bool(flags & LOG_FLAG_HAS_SOFT)
    hard_size = n * e * t * width
    soft_size = n * e * t * c * 4 if has_soft else 0
    expected = offset + hard_size + soft_size + _CRC.size
    if len(data) != expected:
        raise DimensionMismatchError(f"header declares {expected} bytes (N={n}, E={e}, T={t}, C={c}), "
                                     f"file has {len(data)}")

    payload = data[offset:offset + hard_size + soft_size]
    (stored,) = _CRC.unpack_from(data, offset + hard_size + soft_size)
    actual = zlib.crc32(payload) & _U32_MAX
    if stored != actual:
        raise ChecksumError(f"payload CRC32 {actual:08x} does not match stored {stored:08x}")

    hard = np.frombuffer(payload, dtype=np.dtype(f"<u{width}"), count=n * e * t).reshape(n, e, t)
    soft = None
    if has_soft:
        soft = np.frombuffer(payload, dtype="<f4", offset=hard_size).reshape(n, e, t, c)
    return PredictionLog(hard, checkpoints, c, soft)


def write_log(path, log):
    atomic_write(path, encode_log(log))
    logger.info("Wrote log %s: N=%d E=%d T=%d C=%d soft=%s", path, log.num_networks,
                log.num_checkpoints, log.num_examples, log.num_classes, log.has_soft)
    return path


def read_log(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as e:
        raise InputError(f"log file not found: {path}") from e
    return decode_log(data)


# ---------------------------------------------------------------------------
# JSON formats
# ---------------------------------------------------------------------------

def _class_index(classes):
    if classes is None:
        return None
    if len(set(classes)) != len(classes):
        raise InputError("class vocabulary has duplicate entries")
    return {name: k for k, name in enumerate(classes)}


def _map_classes(values, index):
    """Map class names (or integer indices when there is no vocabulary) to dense indices."""
    if index is None:
        return np.asarray(values)
    try:
        return np.vectorize(index.__getitem__, otypes=[np.int64])(np.asarray(values, dtype=object))
    except KeyError as e:
        raise InputError(f"class {e.args[0]!r} is not in the declared vocabulary") from e


def _num_classes(data, index):
    if index is not None:
        declared = data.get("num_classes", len(index))
        if declared != len(index):
            raise InputError(f"num_classes={declared} disagrees with a {len(index)}-class vocabulary")
        return len(index)
    if "num_classes" not in data:
        raise InputError("JSON input needs 'num_classes' or a 'classes' vocabulary")
    return int(data["num_classes"])


def log_from_json(data):
    """Build a PredictionLog from the plain-JSON interchange document."""
    missing = {"checkpoints", "hard_preds"} - set(data)
    if missing:
        raise InputError(f"JSON log is missing {sorted(missing)}")
    index = _class_index(data.get("classes"))
    num_classes = _num_classes(data, index)
    hard = _map_classes(data["hard_preds"], index)
    soft = data.get("soft_preds")
    return PredictionLog(hard, data["checkpoints"], num_classes,
                         None if soft is None else np.asarray(soft, dtype=np.float32))


def import_json_log(path):
    log = log_from_json(read_json(path))
    logger.info("Imported JSON log %s: N=%d E=%d T=%d", path, log.num_networks,
                log.num_checkpoints, log.num_examples)
    return log


def log_to_json(log, classes=None):
    data = {
        "num_classes": log.num_classes,
        "checkpoints": [str(c) for c in log.checkpoints],
        "hard_preds": log.hard_preds.astype(np.int64).tolist(),
    }
    if classes is not None:
        data["classes"] = list(classes)
        data["hard_preds"] = np.asarray(classes, dtype=object)[log.hard_preds].tolist()
    if log.has_soft:
        data["soft_preds"] = log.soft_preds.astype(np.float64).tolist()
    return data


def load_any_log(path):
    """LogFile when the magic matches, otherwise the JSON interchange format."""
    try:
        with open(path, "rb") as f:
            head = f.read(len(LOG_MAGIC))
    except FileNotFoundError as e:
        raise InputError(f"log file not found: {path}") from e
    if head == LOG_MAGIC:
        return read_log(path)
    if head.lstrip()[:1] in (b"{", b""):
        return import_json_log(path)
    raise BadMagicError(f"{path} is neither a LogFile nor a JSON log")


def read_labels(path):
    data = read_json(path)
    if "labels" not in data:
        raise InputError(f"{path} has no 'labels' array")
    index = _class_index(data.get("classes"))
    return LabelSet(_map_classes(data["labels"], index), _num_classes(data, index))


def write_labels(path, labels):
    atomic_write(path, canonical_json({"num_classes": labels.num_classes,
                                       "labels": labels.labels.tolist()}))
    return path
