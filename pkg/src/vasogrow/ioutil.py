"""Small file-writing helpers shared by the exporters.

All writers go through an atomic write-temp-then-rename so a crash can
never leave a half-written artifact behind.
"""

from __future__ import annotations

import json
import os
import tempfile

__all__ = ["atomic_write_text", "atomic_write_bytes", "atomic_write_json"]


def _replace_with(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    _replace_with(path, text.encode("utf-8"))


def atomic_write_bytes(path, data: bytes) -> None:
    _replace_with(path, data)


def atomic_write_json(path, obj) -> None:
    """Canonical JSON: sorted keys, stable separators, trailing newline."""
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    atomic_write_text(path, text)
