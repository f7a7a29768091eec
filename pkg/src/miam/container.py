"""Binary container used for processed datasets, latents and checkpoints.

Layout: an 8-byte magic, a length-prefixed JSON header, then one
length-prefixed raw block per array (C-order, little-endian), in the order
named by the header. Writing the same content twice produces identical bytes,
which the round-trip and determinism tests rely on.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from .data import Dataset, TimeSeriesSample
from .errors import ParseError

MAGIC = b"MIAMBIN1"

_DTYPES = {"float64": "<f8", "float32": "<f4", "uint8": "|u1", "int64": "<i8"}


def write_blocks(path, header: dict, arrays: Dict[str, np.ndarray]) -> None:
    names = list(arrays.keys())
    meta = []
    for name in names:
        a = np.ascontiguousarray(arrays[name])
        if a.dtype.name not in _DTYPES:
            a = a.astype(np.float64)
        meta.append({"name": name, "dtype": a.dtype.name, "shape": list(a.shape)})
        arrays[name] = a
    full_header = dict(header)
    full_header["blocks"] = meta
    raw = json.dumps(full_header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for name in names:
            a = arrays[name].astype(_DTYPES[arrays[name].dtype.name], copy=False)
            payload = a.tobytes(order="C")
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def read_blocks(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ParseError(f"{path}: not a container file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for meta in header.pop("blocks"):
            (nbytes,) = struct.unpack("<Q", f.read(8))
            buf = f.read(nbytes)
            if len(buf) != nbytes:
                raise ParseError(f"{path}: truncated block {meta['name']!r}")
            a = np.frombuffer(buf, dtype=_DTYPES[meta["dtype"]]).reshape(meta["shape"])
            arrays[meta["name"]] = a.astype(meta["dtype"], copy=False)
    return header, arrays


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def save_dataset(path, dataset: Dataset, extra_header: Optional[dict] = None) -> None:
    header = {
        "kind": "dataset",
        "num_variables": dataset.num_variables,
        "vocabulary": list(dataset.variable_names) if dataset.variable_names else None,
        "samples": [
            {"id": s.subject_id, "label": None if s.label is None else int(s.label)}
            for s in dataset.samples
        ],
    }
    if dataset.normalization is not None:
        header["normalization"] = dataset.normalization.to_dict()
    if extra_header:
        header.update(extra_header)

    arrays: Dict[str, np.ndarray] = {}
    for i, s in enumerate(dataset.samples):
        arrays[f"{i}:t"] = s.timestamps
        arrays[f"{i}:x"] = s.values
        arrays[f"{i}:m"] = s.mask.astype(np.uint8)
        arrays[f"{i}:d"] = s.intervals
    write_blocks(path, header, arrays)


def load_dataset(path) -> Dataset:
    from .ingest import NormalizationStats  # local import breaks a module cycle

    header, arrays = read_blocks(path)
    if header.get("kind") != "dataset":
        raise ParseError(f"{path}: container kind {header.get('kind')!r}, expected 'dataset'")
    samples = []
    for i, meta in enumerate(header["samples"]):
        samples.append(TimeSeriesSample(
            subject_id=meta["id"],
            timestamps=arrays[f"{i}:t"],
            values=arrays[f"{i}:x"],
            mask=arrays[f"{i}:m"].astype(np.float64),
            intervals=arrays[f"{i}:d"],
            label=meta["label"],
        ))
    norm = None
    if "normalization" in header:
        norm = NormalizationStats.from_dict(header["normalization"])
    vocab = header.get("vocabulary")
    return Dataset(
        samples=tuple(samples),
        num_variables=header["num_variables"],
        variable_names=tuple(vocab) if vocab else None,
        normalization=norm,
    )


# ---------------------------------------------------------------------------
# dense ground-truth latents (synthetic data only)
# ---------------------------------------------------------------------------

def save_latents(path, ids, timestamps, latents) -> None:
    header = {"kind": "latents", "ids": list(ids)}
    arrays: Dict[str, np.ndarray] = {}
    for i, (t, z) in enumerate(zip(timestamps, latents)):
        arrays[f"{i}:t"] = np.asarray(t, dtype=np.float64)
        arrays[f"{i}:z"] = np.asarray(z, dtype=np.float64)
    write_blocks(path, header, arrays)


def load_latents(path):
    header, arrays = read_blocks(path)
    if header.get("kind") != "latents":
        raise ParseError(f"{path}: container kind {header.get('kind')!r}, expected 'latents'")
    ids = header["ids"]
    ts = [arrays[f"{i}:t"] for i in range(len(ids))]
    zs = [arrays[f"{i}:z"] for i in range(len(ids))]
    return ids, ts, zs


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: Dict[str, "object"], header: dict,
                    opt_state: Optional[dict] = None) -> None:
    """Write named parameter tensors plus optional optimizer state.

    ``params`` maps name -> Tensor (or ndarray). ``header`` should carry the
    model config and any bookkeeping (epoch, fingerprint, ...).
    """
    arrays: Dict[str, np.ndarray] = {}
    names = []
    for name, p in params.items():
        arrays[f"p:{name}"] = np.asarray(getattr(p, "data", p))
        names.append(name)
    full = dict(header)
    full["kind"] = "checkpoint"
    full["param_names"] = names
    if opt_state is not None:
        full["opt"] = {"t": opt_state["t"], "skipped": opt_state.get("skipped", 0)}
        for name in names:
            arrays[f"m:{name}"] = np.asarray(opt_state["m"][name])
            arrays[f"v:{name}"] = np.asarray(opt_state["v"][name])
    write_blocks(path, full, arrays)


def load_checkpoint(path):
    """Returns (header, params: dict[str, ndarray], opt_state or None)."""
    header, arrays = read_blocks(path)
    if header.get("kind") != "checkpoint":
        raise ParseError(f"{path}: container kind {header.get('kind')!r}, expected 'checkpoint'")
    params = {name: arrays[f"p:{name}"] for name in header["param_names"]}
    opt_state = None
    if "opt" in header:
        opt_state = {
            "t": header["opt"]["t"],
            "skipped": header["opt"].get("skipped", 0),
            "m": {name: arrays[f"m:{name}"] for name in header["param_names"]},
            "v": {name: arrays[f"v:{name}"] for name in header["param_names"]},
        }
    return header, params, opt_state
