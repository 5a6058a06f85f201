"""Text serialization helpers shared by datasets, checkpoints and reports.

Every table starts with one ``#`` line holding a JSON provenance record; floats
are written with ``repr`` so they round-trip exactly.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

from . import __version__
from .errors import DataFormatError


def provenance(config: dict | None = None, seed: int | None = None) -> dict:
    return {"tool": "prescribe", "version": __version__, "seed": seed, "config": config or {}}


def fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "item"):
        return fmt(value.item())
    return str(value)


def write_tsv(path: Path, header: Sequence[str], rows: Iterable[Sequence], prov: dict | None = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        if prov is not None:
            fh.write("# " + json.dumps(prov, sort_keys=True) + "\n")
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(fmt(v) for v in row) + "\n")


def read_tsv(path: Path) -> tuple[list[str], list[tuple[int, list[str]]], dict | None]:
    """Return ``(header, [(line_number, fields), ...], provenance)``."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"{path}: file not found")
    header = None
    prov = None
    rows: list[tuple[int, list[str]]] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.startswith("#"):
                if header is None and prov is None:
                    try:
                        prov = json.loads(line[1:].strip())
                    except json.JSONDecodeError:
                        prov = None
                continue
            if header is None:
                header = line.split("\t")
                continue
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != len(header):
                raise DataFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, found {len(fields)}"
                )
            rows.append((lineno, fields))
    if header is None:
        raise DataFormatError(f"{path}: missing header row")
    return header, rows, prov


def parse_float(text: str, path: Path, lineno: int, field: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataFormatError(f"{path}:{lineno}: field {field!r} is not a number: {text!r}") from None


def write_json(path: Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"{path}: file not found")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
