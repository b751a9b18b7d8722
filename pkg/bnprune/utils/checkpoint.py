"""
Checkpoint format - text header plus little-endian parameter blobs

    bnprune-checkpoint v1 <header bytes>\\n
    <header: JSON object, sorted keys>\\n
    <blob region>

The header holds ``format``, ``version``, ``stage``, ``seed``, ``graph``
(layer description), ``config``, ``history``, ``rescale_alpha``, a
``manifest`` of tensors (name, dtype, shape, offset, nbytes; offsets are
relative to the blob region) and ``checksum``, the SHA-256 of the canonical
header without ``checksum`` followed by the blob region. Tensors named ``ema/<param>`` carry averaged parameters.
"""
from typing import Any, Dict, List, NamedTuple, Optional, Tuple
from pathlib import Path
import json
import logging

import numpy as np

from bnprune.exceptions import CheckpointError, GraphError
from bnprune.utils.netgraph import NetworkGraph
from bnprune.utils.validator import digest, require_checksum, validate_stage

logger = logging.getLogger(__name__)

FORMAT = "bnprune-checkpoint"
VERSION = 1
EMA_PREFIX = "ema/"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointAux(NamedTuple):
    stage: str = "baseline"
    seed: int = 0
    config: Dict[str, Any] = {}
    history: List[Dict[str, Any]] = []
    rescale_alpha: float = 1.0
    ema: Dict[str, np.ndarray] = {}


def save_checkpoint(graph: NetworkGraph, aux: Optional[CheckpointAux] = None) -> bytes:
    aux = aux or CheckpointAux()
    validate_stage(aux.stage)

    tensors: Dict[str, np.ndarray] = dict(graph.params)
    for key, value in aux.ema.items():
        tensors[EMA_PREFIX + key] = np.asarray(value, dtype=graph.dtype)

    manifest, chunks, offset = [], [], 0
    for name in sorted(tensors):
        raw = np.ascontiguousarray(tensors[name], dtype=_DTYPES[graph.dtype]).tobytes()
        manifest.append({
            "name": name,
            "dtype": graph.dtype,
            "shape": list(np.shape(tensors[name])),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)

    header = {
        "format": FORMAT,
        "version": VERSION,
        "stage": aux.stage,
        "seed": aux.seed,
        "graph": graph.describe(),
        "config": aux.config,
        "history": aux.history,
        "rescale_alpha": aux.rescale_alpha,
        "manifest": manifest,
    }
    header["checksum"] = digest(_signed_region(header, blob))
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    return f"{FORMAT} v{VERSION} {len(encoded)}\n".encode("ascii") + encoded + b"\n" + blob


def _signed_region(header: Dict[str, Any], blob: bytes) -> bytes:
    unsigned = {key: value for key, value in header.items() if key != "checksum"}
    return json.dumps(unsigned, sort_keys=True).encode("utf-8") + b"\n" + blob


def _parse_header(data: bytes) -> Tuple[Dict[str, Any], bytes]:
    newline = data.find(b"\n")
    if newline < 0:
        raise CheckpointError("Checkpoint has no header line")
    try:
        magic, version, length = data[:newline].decode("ascii").split(" ")
        length = int(length)
    except (UnicodeDecodeError, ValueError):
        raise CheckpointError("Checkpoint header line is malformed")
    if magic != FORMAT:
        raise CheckpointError(f"Not a checkpoint (format '{magic}')")
    if version != f"v{VERSION}":
        raise CheckpointError(f"Checkpoint version {version} is not supported (expected v{VERSION})")

    start = newline + 1
    end = start + length
    if len(data) < end + 1 or data[end:end + 1] != b"\n":
        raise CheckpointError("Checkpoint header is truncated")
    try:
        header = json.loads(data[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Checkpoint header is not valid JSON: {e}")
    if header.get("version") != VERSION:
        raise CheckpointError(f"Checkpoint version {header.get('version')} is not supported (expected {VERSION})")
    return header, data[end + 1:]


def load_checkpoint(data: bytes) -> Tuple[NetworkGraph, CheckpointAux]:
    """bytes -> (graph, aux); checksum verified before any tensor is decoded"""
    header, blob = _parse_header(data)
    require_checksum(_signed_region(header, blob), header.get("checksum"))

    params: Dict[str, np.ndarray] = {}
    ema: Dict[str, np.ndarray] = {}
    try:
        for entry in header["manifest"]:
            start, size = entry["offset"], entry["nbytes"]
            if start + size > len(blob):
                raise CheckpointError(f"Tensor '{entry['name']}' lies outside the blob region")
            wire = np.dtype(_DTYPES[entry["dtype"]])
            array = np.frombuffer(blob, dtype=wire, count=size // wire.itemsize, offset=start)
            array = array.reshape(entry["shape"]).astype(entry["dtype"])
            if entry["name"].startswith(EMA_PREFIX):
                ema[entry["name"][len(EMA_PREFIX):]] = array
            else:
                params[entry["name"]] = array
        graph = NetworkGraph.from_description(header["graph"], params)
        aux = CheckpointAux(
            stage=validate_stage(header["stage"]),
            seed=int(header.get("seed", 0)),
            config=header.get("config") or {},
            history=header.get("history") or [],
            rescale_alpha=float(header.get("rescale_alpha", 1.0)),
            ema=ema,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Checkpoint manifest is malformed: {e}")
    except GraphError as e:
        raise CheckpointError(f"Checkpoint graph is invalid: {e}")
    return graph, aux


def write_checkpoint(path: Path, graph: NetworkGraph, aux: Optional[CheckpointAux] = None) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(save_checkpoint(graph, aux))
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}")
    logger.info(f"Checkpoint written: {path}")
    return path


def read_checkpoint(path: Path) -> Tuple[NetworkGraph, CheckpointAux]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint not found: {path}")
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    return load_checkpoint(data)
