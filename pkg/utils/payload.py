"""Manifest + payload directories.

A payload directory holds ``manifest.json`` and one raw little-endian float32
file per array (``<name>.f32``). The manifest lists each array's shape under
``"arrays"`` next to whatever metadata the caller stores.
"""

import json
import logging
import os
from typing import Dict, Tuple

import numpy as np

from utils.errors import ArtifactError, TruncatedPayloadError

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
_DTYPE = np.dtype("<f4")


def write_payload_dir(path: str, manifest: Dict, arrays: Dict[str, np.ndarray]) -> None:
    os.makedirs(path, exist_ok=True)
    shapes = {}
    for name, array in arrays.items():
        data = np.ascontiguousarray(array, dtype=_DTYPE)
        data.tofile(os.path.join(path, f"{name}.f32"))
        shapes[name] = list(data.shape)
    document = dict(manifest)
    document["arrays"] = shapes
    with open(os.path.join(path, MANIFEST), "w") as f:
        json.dump(document, f, indent=4, sort_keys=True)


def read_payload_dir(path: str) -> Tuple[Dict, Dict[str, np.ndarray]]:
    manifest_path = os.path.join(path, MANIFEST)
    try:
        with open(manifest_path, "r") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactError(f"cannot read manifest {manifest_path}: {e}") from e

    arrays = {}
    for name, shape in manifest.pop("arrays", {}).items():
        file_path = os.path.join(path, f"{name}.f32")
        expected = int(np.prod(shape, dtype=np.int64))
        try:
            data = np.fromfile(file_path, dtype=_DTYPE)
        except OSError as e:
            raise ArtifactError(f"cannot read payload {file_path}: {e}") from e
        if data.size != expected:
            raise TruncatedPayloadError(f"{file_path}: expected {expected} values, found {data.size}")
        arrays[name] = data.astype(np.float32).reshape(shape)
    return manifest, arrays


def has_payload_dir(path: str) -> bool:
    return os.path.isfile(os.path.join(path, MANIFEST))
