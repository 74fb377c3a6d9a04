"""Small helpers shared by the file formats: atomic writes and key=value manifests."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def write_manifest(path, entries: dict) -> None:
    """Write a plain ``key=value`` manifest, one entry per line, in insertion order."""
    lines = []
    for key, value in entries.items():
        text = format_value(value)
        if "\n" in text:
            raise ValueError(f"manifest value for {key!r} spans lines")
        lines.append(f"{key}={text}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    """Read a ``key=value`` file. Blank lines and ``#`` comments are skipped.

    Values are returned as strings.
    """
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
