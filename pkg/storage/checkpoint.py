"""
Checkpoints: a JSON manifest (topology, bit-widths, calibration, plans, provenance)
next to a binary blob of named tensors.

Blob record per tensor, little-endian:
    u32 name length | name (utf-8) | u8 dtype tag | u8 rank | u32 dims[rank] | raw values
"""
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from codec.entropy import EntropyProxy
from codec.layers import ClipParams
from codec.model import WEIGHT_KINDS, LayerNode, ModelConfig, ModelGraph, input_spec
from draq.calibration import CalibStats, LayerStats
from engine.tensor import Tensor, precision
from hwopt.bitwidth import BitWidthPlan
from hwopt.slimming import PruneReport

logger = logging.getLogger("lic-quant.storage.checkpoint")

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"

DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}


class CheckpointError(Exception):
    """Raised when a checkpoint cannot be written or read."""
    pass


class CheckpointVersionError(CheckpointError):
    """Raised when a checkpoint was written with an unsupported format version."""
    pass


class CheckpointMismatchError(CheckpointError):
    """Raised when the blob does not hold exactly the tensors the manifest lists."""
    pass


class CheckpointTruncatedError(CheckpointError):
    """Raised when the blob ends before the tensors the manifest lists."""
    pass


@dataclass
class Checkpoint:
    model: ModelGraph
    stage: str = ""
    seed: int | None = None
    config_hash: str | None = None
    stats: CalibStats | None = None
    plan: BitWidthPlan | None = None
    prune_report: PruneReport | None = None
    extra: dict[str, Any] = field(default_factory=dict)


def encode_tensor(name: str, array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in DTYPE_TAGS:
        raise CheckpointError(f"tensor {name}: unsupported dtype {array.dtype}")
    encoded = name.encode("utf-8")
    header = struct.pack("<I", len(encoded)) + encoded + struct.pack("<BB", DTYPE_TAGS[dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_tensors(blob: bytes) -> list[tuple[str, np.ndarray]]:
    """
    Decode every record of a blob in order.

    :raises: CheckpointTruncatedError when a record runs past the end of the blob.
    """
    tensors = []
    pos = 0

    def take(count: int, what: str) -> bytes:
        nonlocal pos
        if pos + count > len(blob):
            raise CheckpointTruncatedError(f"blob truncated at byte {pos} while reading {what}")
        chunk = blob[pos:pos + count]
        pos += count
        return chunk

    while pos < len(blob):
        (length,) = struct.unpack("<I", take(4, "a name length"))
        name = take(length, "a tensor name").decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2, f"the header of {name}"))
        if tag not in TAG_DTYPES:
            raise CheckpointMismatchError(f"blob/manifest mismatch: tensor {name} has unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"the shape of {name}"))
        dtype = TAG_DTYPES[tag]
        count = int(np.prod(shape)) if rank else 1
        raw = take(count * dtype.itemsize, f"the values of {name}")
        tensors.append((name, np.frombuffer(raw, dtype=dtype).reshape(shape).copy()))
    return tensors


def _clip_to_dict(clip: ClipParams | None) -> dict[str, Any] | None:
    return None if clip is None else {"lo": clip.lo, "hi": clip.hi, "one_sided": clip.one_sided}


def _layer_manifest(model: ModelGraph, layer: LayerNode) -> dict[str, Any]:
    entry = {
        "id": layer.id,
        "kind": layer.kind,
        "hyper": dict(layer.hyper),
        "params": list(layer.params),
        "bits": layer.bits,
        "act_range": list(layer.act_range) if layer.act_range is not None else None,
        "act_signedness": layer.act_signedness,
        "clip": _clip_to_dict(layer.clip),
    }
    if model.quantized and layer.kind in WEIGHT_KINDS and (layer.act_range is not None or layer.latent_input):
        entry["input_spec"] = input_spec(layer).to_dict()
    return entry


def _stats_to_dict(stats: CalibStats) -> dict[str, Any]:
    return {
        "activations": {layer: asdict(s) for layer, s in stats.activations.items()},
        "weights": {layer: list(bounds) for layer, bounds in stats.weights.items()},
        "sample_count": stats.sample_count,
    }


def _stats_from_dict(data: dict[str, Any]) -> CalibStats:
    return CalibStats(
        activations={layer: LayerStats(**s) for layer, s in data["activations"].items()},
        weights={layer: (float(lo), float(hi)) for layer, (lo, hi) in data["weights"].items()},
        sample_count=int(data["sample_count"]),
    )


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    """
    Write a checkpoint directory (manifest plus blob).

    :param Checkpoint checkpoint: Model and metadata.
    :param path: Target directory, created if needed.
    :return: The directory.
    :rtype: Path
    """
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    model = checkpoint.model
    records, tensor_entries = [], []
    for name, tensor in model.parameters().items():
        record = encode_tensor(name, tensor.data)
        tensor_entries.append({"name": name, "dtype": tensor.data.dtype.str, "shape": list(tensor.shape),
                               "nbytes": len(record)})
        records.append(record)
    blob = b"".join(records)
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": checkpoint.stage,
        "seed": checkpoint.seed,
        "config_hash": checkpoint.config_hash,
        "model": {
            "config": model.config.to_dict(),
            "quantized": model.quantized,
            "entropy": {"p_min": model.entropy.p_min},
            "layers": [_layer_manifest(model, layer) for layer in model.layers],
        },
        "tensors": tensor_entries,
        "blob_size": len(blob),
        "calibration": _stats_to_dict(checkpoint.stats) if checkpoint.stats is not None else None,
        "plan": checkpoint.plan.to_dict() if checkpoint.plan is not None else None,
        "prune_report": checkpoint.prune_report.to_dict() if checkpoint.prune_report is not None else None,
        "extra": checkpoint.extra,
    }
    (directory / BLOB_NAME).write_bytes(blob)
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Saved {checkpoint.stage or 'model'} checkpoint to {directory} "
                f"({len(tensor_entries)} tensors, {len(blob)} bytes)")
    return directory


def _parameter(array: np.ndarray) -> Tensor:
    # Keep the stored dtype so the round trip is bit-exact
    bits = 64 if array.dtype == np.float64 else 32
    with precision(bits):
        return Tensor(array, requires_grad=True)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """
    Read a checkpoint directory written by ``save_checkpoint``.

    :param path: Checkpoint directory.
    :return: The model and its metadata.
    :rtype: Checkpoint

    :raises: CheckpointError when files are missing or unreadable,
        CheckpointVersionError on an unknown format version,
        CheckpointMismatchError when the blob and manifest disagree,
        CheckpointTruncatedError when the blob is cut short.
    """
    directory = Path(path)
    try:
        with open(directory / MANIFEST_NAME, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        blob = (directory / BLOB_NAME).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint {directory} is incomplete: {e.filename} missing") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint manifest in {directory} is not valid JSON") from e

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint {directory} has format version {version}, "
                                     f"this build reads version {FORMAT_VERSION}")
    if len(blob) < manifest["blob_size"]:
        raise CheckpointTruncatedError(f"blob truncated: manifest lists {manifest['blob_size']} bytes, "
                                       f"found {len(blob)}")
    if len(blob) != manifest["blob_size"]:
        raise CheckpointMismatchError(f"blob/manifest mismatch: manifest lists {manifest['blob_size']} bytes, "
                                      f"found {len(blob)}")
    decoded = decode_tensors(blob)
    expected = [(entry["name"], entry["dtype"], tuple(entry["shape"])) for entry in manifest["tensors"]]
    found = [(name, array.dtype.str, array.shape) for name, array in decoded]
    if expected != found:
        raise CheckpointMismatchError(f"blob/manifest mismatch: manifest lists {expected}, blob holds {found}")
    tensors = {name: _parameter(array) for name, array in decoded}
    for name, tensor in tensors.items():
        tensor.name = name

    spec = manifest["model"]
    layers = []
    for entry in spec["layers"]:
        clip = entry["clip"]
        layers.append(LayerNode(
            id=entry["id"],
            kind=entry["kind"],
            hyper=entry["hyper"],
            params={name: tensors[f"{entry['id']}.{name}"] for name in entry["params"]},
            bits=entry["bits"],
            act_range=tuple(entry["act_range"]) if entry["act_range"] is not None else None,
            act_signedness=entry["act_signedness"],
            clip=ClipParams(clip["lo"], clip["hi"], clip["one_sided"]) if clip is not None else None,
        ))
    model = ModelGraph(
        config=ModelConfig(**spec["config"]),
        layers=layers,
        entropy=EntropyProxy(log_scale=tensors["entropy.log_scale"], p_min=spec["entropy"]["p_min"]),
        quantized=spec["quantized"],
    )
    model.validate()
    logger.info(f"Loaded {manifest['stage'] or 'model'} checkpoint from {directory}")
    return Checkpoint(
        model=model,
        stage=manifest["stage"],
        seed=manifest["seed"],
        config_hash=manifest["config_hash"],
        stats=_stats_from_dict(manifest["calibration"]) if manifest["calibration"] is not None else None,
        plan=BitWidthPlan.from_dict(manifest["plan"]) if manifest["plan"] is not None else None,
        prune_report=PruneReport.from_dict(manifest["prune_report"]) if manifest["prune_report"] is not None else None,
        extra=manifest.get("extra", {}),
    )
