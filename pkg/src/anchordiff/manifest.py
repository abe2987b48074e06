"""Run manifests: what ran, with which inputs, for how long.

The manifest records enough to reproduce a run bit-exactly: command,
config, seed, and a content hash over the resolved configuration plus any
input files. Written atomically so a crashed run never leaves a half
manifest behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_path: str
    seed: int
    out_dir: str
    content_hash: str
    duration_s: float


def content_hash(config_lines, input_paths=()):
    """SHA-1 over the resolved config and raw input file bytes."""
    digest = hashlib.sha1()
    for line in config_lines:
        digest.update(line.encode())
        digest.update(b"\n")
    for path in input_paths:
        digest.update(os.path.basename(str(path)).encode())
        with open(path, "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()


def write_manifest(manifest, path):
    """Atomic JSON write: temp file in the target directory, then replace."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(asdict(manifest), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(path):
    with open(path) as fh:
        return RunManifest(**json.load(fh))
