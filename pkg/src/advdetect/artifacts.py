"""
Sidecar metadata and the hash chain that ties artifacts together.

Every binary artifact ``foo.ext`` gets a ``foo.ext.json`` sidecar holding the
SHA-256 of the binary and, under ``inputs``, the hashes of the artifacts it was
built from. :func:`verify` re-hashes both ends so a stale or tampered upstream
file is caught before any stage consumes it.
"""

from __future__ import annotations

import hashlib
import json
import os

from .types import StaleArtifactError

FORMAT_VERSION = 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sidecar_path(path) -> str:
    return str(path) + ".json"


def write_sidecar(path, meta: dict, inputs: dict | None = None) -> dict:
    """Hash ``path`` and write its sidecar. ``inputs`` maps role -> artifact path."""
    meta = dict(meta)
    meta["format_version"] = FORMAT_VERSION
    meta["sha256"] = sha256_file(path)
    meta["inputs"] = {
        role: {"path": os.path.relpath(p, os.path.dirname(os.path.abspath(path))), "sha256": sha256_file(p)}
        for role, p in sorted((inputs or {}).items())
    }
    with open(sidecar_path(path), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return meta


def read_sidecar(path) -> dict:
    sc = sidecar_path(path)
    if not os.path.isfile(path) or not os.path.isfile(sc):
        raise StaleArtifactError(f"missing artifact or sidecar for {path}")
    with open(sc) as f:
        return json.load(f)


def verify(path, recursive: bool = True) -> dict:
    """
    Check ``path`` against its sidecar and every recorded input against its
    recorded hash. Returns the sidecar. Raises :class:`StaleArtifactError`.
    """
    meta = read_sidecar(path)
    if sha256_file(path) != meta.get("sha256"):
        raise StaleArtifactError(f"{path} does not match the hash in its sidecar")
    base = os.path.dirname(os.path.abspath(path))
    for role, rec in meta.get("inputs", {}).items():
        p = os.path.normpath(os.path.join(base, rec["path"]))
        if not os.path.isfile(p):
            raise StaleArtifactError(f"input {role!r} of {path} is missing: {p}")
        if sha256_file(p) != rec["sha256"]:
            raise StaleArtifactError(f"input {role!r} of {path} changed since it was consumed")
        if recursive and os.path.isfile(sidecar_path(p)):
            verify(p, recursive=True)
    return meta
