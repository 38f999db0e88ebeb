"""Canonical key-value text: one ``key=value`` per line, keys sorted.

Blank lines and ``#`` comments are ignored when reading.  Dotted keys
express nesting (``model.hidden=16``); :func:`section` pulls one level out.
"""
from __future__ import annotations

from .errors import ParseError


def dumps(d: dict) -> str:
    lines = []
    for key in sorted(d):
        val = str(d[key])
        if "\n" in val or "=" in key or not key:
            raise ValueError(f"cannot serialise {key!r}={val!r} as key-value text")
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


def loads(text: str, path: str | None = None) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParseError(f"expected key=value, got {raw!r}", line=n, path=path)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", line=n, path=path)
        out[key] = val.strip()
    return out


def load(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), path=str(path))


def section(d: dict[str, str], prefix: str) -> dict[str, str]:
    """Entries under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in d.items() if k.startswith(p)}
