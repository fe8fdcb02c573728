"""Run manifests: inputs, config, seeds and output hashes for every CLI run."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

MANIFEST_NAME = "run_manifest.json"
OUT_PLACEHOLDER = "{out}"


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: str | os.PathLike, exclude: Iterable[str] = (MANIFEST_NAME,)) -> dict[str, str]:
    """Relative path -> sha256 for every file under ``root``."""
    root = Path(root)
    skip = set(exclude)
    return {
        p.relative_to(root).as_posix(): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.relative_to(root).as_posix() not in skip
    }


def portable_argv(argv: Sequence[str], out_dir: str | os.PathLike) -> list[str]:
    """Replace the output directory in ``argv`` by a placeholder."""
    out = str(out_dir)
    res, swap = [], False
    for a in argv:
        if swap:
            res.append(OUT_PLACEHOLDER)
            swap = False
        elif a == "--out":
            res.append(a)
            swap = True
        elif a.startswith("--out="):
            res.append(f"--out={OUT_PLACEHOLDER}")
        else:
            res.append(a.replace(out, OUT_PLACEHOLDER) if out and a == out else a)
    return res


def write_run_manifest(
    out_dir: str | os.PathLike,
    command: str,
    argv: Sequence[str],
    config: Mapping,
    seeds: Sequence[int],
    inputs: Iterable[str | os.PathLike],
) -> Path:
    from . import __version__

    out = Path(out_dir)
    data = {
        "tool": "loracompose",
        "version": __version__,
        "command": command,
        "argv": portable_argv(argv, out),
        "config": config,
        "seeds": list(seeds),
        "inputs": {str(p): sha256_file(p) for p in sorted({str(p) for p in inputs}) if Path(p).is_file()},
        "outputs": hash_tree(out),
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    return path


def read_run_manifest(path: str | os.PathLike) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return json.loads(path.read_text())
