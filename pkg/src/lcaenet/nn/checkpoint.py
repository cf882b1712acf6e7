"""Checkpoint files.

A checkpoint is an uncompressed zip archive readable by ``numpy.load``:

* one ``<name>.npy`` member per named array (``.npy`` headers carry dtype
  and shape),
* a ``__meta__.npy`` member holding a JSON document as a 0-d unicode array.
  The document always contains ``"format_version"``; the rest (model config,
  epoch, metrics, ...) is owned by the writer.

Member timestamps are pinned so identical contents give identical bytes.
"""
from __future__ import annotations

import json
import os
import zipfile
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

FORMAT_VERSION = 1
META_KEY = "__meta__"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["format_version"] = FORMAT_VERSION
    if META_KEY in arrays:
        raise CheckpointError(f"{META_KEY!r} is reserved")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    members = [(META_KEY, np.array(json.dumps(meta, sort_keys=True)))]
    members += sorted(arrays.items())
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in members:
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(arr, order="C"), allow_pickle=False)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except FileNotFoundError:
        raise
    except Exception as exc:  # zipfile / format errors
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if META_KEY not in arrays:
        raise CheckpointError(f"{path}: missing {META_KEY} record")
    meta = json.loads(str(arrays.pop(META_KEY)))
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {version!r}")
    return arrays, meta
