"""
Run manifests, content digests and atomic file writes.

A manifest's digest covers everything except the `outputs` table, so it is
known before any output exists and every output can embed it.
"""

import os
import json
import math
import hashlib
import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from library.config import TOOLKIT_NAME, TOOLKIT_VERSION
from library.errors import InputError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_KINDS = ("toy", "theory")


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def _plain(value):
    """numpy scalars to Python, non-finite floats to the strings "inf", "-inf" and "nan"."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else repr(value)
    return value


def canonical_json(data):
    """Deterministic JSON text: sorted keys, fixed separators, trailing newline."""
    return json.dumps(_plain(data), sort_keys=True, indent=2, separators=(",", ": "),
                      allow_nan=False) + "\n"


def atomic_write(path, data):
    """Write bytes or text to path via a temp file in the same directory and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise InputError(f"file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"{path} is not valid JSON: {e}") from e


@dataclass(frozen=True)
class RunManifest:
    kind: str
    config: dict
    dataset: dict = None
    noise: dict = None
    seeds: dict = field(default_factory=dict)
    toolkit: str = TOOLKIT_NAME
    toolkit_version: str = TOOLKIT_VERSION
    outputs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MANIFEST_KINDS:
            raise InputError(f"manifest kind must be one of {MANIFEST_KINDS}, got {self.kind!r}")
        if not isinstance(self.config, dict):
            raise InputError("manifest 'config' must be an object")

    def body(self):
        """Everything the digest covers."""
        return {
            "toolkit": self.toolkit, "toolkit_version": self.toolkit_version,
            "kind": self.kind, "config": self.config, "dataset": self.dataset,
            "noise": self.noise, "seeds": self.seeds,
        }

    @property
    def digest(self):
        return sha256_bytes(canonical_json(self.body()).encode("utf-8"))

    def with_outputs(self, outputs):
        return RunManifest(self.kind, self.config, self.dataset, self.noise, self.seeds,
                           self.toolkit, self.toolkit_version, dict(sorted(outputs.items())))

    def to_dict(self):
        data = self.body()
        data["digest"] = self.digest
        data["outputs"] = self.outputs
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        recorded = data.pop("digest", None)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown manifest keys: {sorted(unknown)}")
        if "kind" not in data or "config" not in data:
            raise InputError("manifest needs 'kind' and 'config'")
        manifest = cls(**data)
        if recorded is not None and recorded != manifest.digest:
            logger.warning("Manifest digest %s does not match its content (%s)", recorded, manifest.digest)
        return manifest


def load_manifest(path):
    return RunManifest.from_dict(read_json(path))


def write_manifest(path, manifest):
    atomic_write(path, canonical_json(manifest.to_dict()))
    logger.info("Manifest written to %s (digest %s)", path, manifest.digest[:12])
    return manifest.digest


def source_digest(log_path):
    """Digest an analysis output should embed: the sibling manifest's, else the log file's own."""
    sibling = Path(log_path).parent / MANIFEST_NAME
    if sibling.exists():
        return load_manifest(sibling).digest
    logger.info("No %s next to %s; embedding the log digest instead", MANIFEST_NAME, log_path)
    return sha256_file(log_path)
