"""Run manifests: per-stage provenance records with hash chaining.

Every pipeline stage writes ``manifest.json`` into its output directory.  The
manifest lists the stage name, seed, configuration, input hashes (usually the
manifest hashes of upstream stages), output file hashes and optional metrics.
Manifests contain no timestamps, so re-running a stage with the same inputs
and seed reproduces the manifest byte for byte; wall-clock numbers go to a
separate ``timing.json`` that is documented as volatile and never hashed.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import FormatError

MANIFEST_NAME = "manifest.json"
TIMING_NAME = "timing.json"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(
    outdir,
    stage: str,
    *,
    seed=None,
    config: dict | None = None,
    inputs: dict | None = None,
    outputs: dict | None = None,
    metrics: dict | None = None,
) -> Path:
    """Write ``manifest.json`` for a stage and return its path.

    ``outputs`` maps artifact names to file paths (relative paths are resolved
    against ``outdir``); the manifest stores their sha256 digests keyed by the
    path relative to ``outdir`` where possible.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    hashed = {}
    for name, path in (outputs or {}).items():
        p = Path(path)
        if not p.is_absolute():
            p = outdir / p
        hashed[name] = {"path": _relposix(p, outdir), "sha256": file_sha256(p)}
    doc = {
        "stage": stage,
        "seed": seed,
        "config": config or {},
        "inputs": inputs or {},
        "outputs": hashed,
        "metrics": metrics or {},
    }
    path = outdir / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _relposix(p: Path, root: Path) -> str:
    try:
        return p.relative_to(root).as_posix()
    except ValueError:
        return p.as_posix()


def manifest_hash(stage_dir) -> str:
    """sha256 of a stage's manifest file; used for chaining downstream."""
    return file_sha256(Path(stage_dir) / MANIFEST_NAME)


def load_manifest(stage_dir) -> dict:
    path = Path(stage_dir) / MANIFEST_NAME
    if not path.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {stage_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_timing(outdir, seconds_by_step: dict) -> Path:
    """Record wall-clock timings next to (but outside) the manifest."""
    path = Path(outdir) / TIMING_NAME
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({k: float(v) for k, v in seconds_by_step.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def verify_outputs(stage_dir) -> list:
    """Re-hash a stage's outputs; returns the names that no longer match."""
    stage_dir = Path(stage_dir)
    doc = load_manifest(stage_dir)
    bad = []
    for name, entry in doc.get("outputs", {}).items():
        p = stage_dir / entry["path"]
        if not p.exists() or file_sha256(p) != entry["sha256"]:
            bad.append(name)
    return bad
