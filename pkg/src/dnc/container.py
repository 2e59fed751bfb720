"""Deterministic named-array containers.

A container is a zip archive holding one ``<name>.npy`` entry per array plus
a ``meta.json`` document. Entries are stored uncompressed with a fixed
timestamp and written in sorted order, so equal contents always produce
byte-identical files. Individual entries stay readable with ``np.load`` after
unzipping, which keeps the format inspectable without this package.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from .errors import FormatError

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
_META_ENTRY = "meta.json"


def write_container(path, arrays: dict, meta: dict) -> None:
    """Write ``arrays`` and ``meta`` to ``path`` as a deterministic zip."""
    payloads = [(_META_ENTRY, _encode_meta(meta))]
    for name in sorted(arrays):
        arr = arrays[name]
        if not isinstance(arr, np.ndarray):
            raise FormatError(f"container entry {name!r} is not an ndarray")
        if arr.dtype == object:
            raise FormatError(f"container entry {name!r} has object dtype")
        buf = io.BytesIO()
        np.save(buf, arr, allow_pickle=False)
        payloads.append((name + ".npy", buf.getvalue()))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for entry_name, payload in payloads:
            info = zipfile.ZipInfo(entry_name, date_time=_FIXED_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, payload)


def read_container(path) -> tuple[dict, dict]:
    """Read a container, returning ``(arrays, meta)``."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise FormatError(f"cannot open container {path}: {exc}") from exc
    with zf:
        names = zf.namelist()
        if _META_ENTRY not in names:
            raise FormatError(f"container {path} is missing {_META_ENTRY}")
        try:
            meta = json.loads(zf.read(_META_ENTRY).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"container {path} has malformed metadata: {exc}") from exc
        arrays = {}
        for entry_name in names:
            if entry_name == _META_ENTRY:
                continue
            if not entry_name.endswith(".npy"):
                raise FormatError(f"container {path} has unexpected entry {entry_name!r}")
            try:
                arrays[entry_name[:-4]] = np.load(
                    io.BytesIO(zf.read(entry_name)), allow_pickle=False
                )
            except ValueError as exc:
                raise FormatError(f"container entry {entry_name!r} is corrupt: {exc}") from exc
    return arrays, meta


def _encode_meta(meta: dict) -> bytes:
    try:
        text = json.dumps(meta, sort_keys=True, indent=2, allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"container metadata is not JSON-serializable: {exc}") from exc
    return (text + "\n").encode("utf-8")
