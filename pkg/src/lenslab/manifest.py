"""Run manifests: every CLI artifact gets a JSON sidecar describing exactly
how to reproduce it.

The identity section (argv, resolved config, seeds, artifact list, version)
determines the outputs bit-for-bit; the volatile section (wall time) is
metadata and excluded from reproducibility comparisons.
"""

from __future__ import annotations

import json
import os
import tempfile


def write_manifest(path, command: str, argv: list, config: dict,
                   artifacts: list, version: str, wall_time_seconds: float) -> None:
    doc = {
        "identity": {
            "command": command,
            "argv": list(argv),
            "config": config,
            "artifacts": [str(a) for a in artifacts],
            "version": version,
        },
        "volatile": {"wall_time_seconds": wall_time_seconds},
    }
    path = str(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(path) -> dict:
    with open(str(path)) as fh:
        return json.load(fh)


def manifest_identity(path) -> dict:
    return read_manifest(path)["identity"]
