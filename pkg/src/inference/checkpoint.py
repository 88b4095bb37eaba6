"""Checkpoint directory: ``manifest.json`` plus a ``weights.bin`` blob.

The blob holds every tensor of :meth:`EncoderModel.named_tensors` as
little-endian float32, concatenated in manifest order. Each manifest entry
records name, shape, byte offset and byte length so a loader can validate the
blob before touching it.
"""
import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np

from src.core.encoder import (
    AttentionSublayer,
    EncoderBlock,
    EncoderConfig,
    EncoderModel,
    GatedMlp,
    Projection,
)
from src.core.errors import CheckpointError
from src.core.lora import LoraAdapter
from src.core.tensor import Tensor
from src.utils.logger import get_logger

logger = get_logger(__name__)

FORMAT_VERSION: int = 1
WEIGHT_DTYPE = np.dtype("<f4")
MANIFEST_FILE: str = "manifest.json"
WEIGHTS_FILE: str = "weights.bin"
LOCK_FILE: str = ".lock"


@dataclass
class Checkpoint:
    model: EncoderModel
    manifest: dict
    path: Optional[Path] = None

    @property
    def seed(self) -> int:
        return int(self.manifest.get("seed", 0))

    @property
    def metadata(self) -> dict:
        return self.manifest.get("metadata", {})

    @property
    def fingerprint(self) -> str:
        return self.manifest["fingerprint"]


def _block_layout(model: EncoderModel) -> list[dict]:
    layout = []
    for block in model.blocks:
        entry: dict[str, Any] = {"attn": block.attn is not None, "mlp": block.mlp is not None}
        if block.mlp is not None:
            entry["mlp_width"] = block.mlp.width
            if block.mlp.z is not None:
                entry["gate"] = "frozen" if block.mlp.gate_frozen else "trainable"
        layout.append(entry)
    return layout


def _lora_layout(model: EncoderModel) -> Optional[dict]:
    adapters = [p.lora for _, _, p in model.iter_projections() if p.lora is not None]
    if not adapters:
        return None
    return {
        "rank": adapters[0].rank,
        "alpha": adapters[0].alpha,
        "targets": sorted({adapter.target for adapter in adapters}),
    }


def _structure(model: EncoderModel) -> dict:
    return {
        "config": model.config.model_dump(mode="json"),
        "blocks": _block_layout(model),
        "lora": _lora_layout(model),
    }


def model_fingerprint(model: EncoderModel) -> str:
    """sha256 over the model structure and its float32 weights."""
    digest = hashlib.sha256(json.dumps(_structure(model), sort_keys=True).encode("utf-8"))
    for name, tensor in model.named_tensors():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(tensor.data, dtype=WEIGHT_DTYPE).tobytes())
    return digest.hexdigest()


@contextmanager
def checkpoint_lock(directory: Path) -> Iterator[None]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise CheckpointError(f"checkpoint directory {directory} is locked by another writer") from e
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def save_checkpoint(
    model: EncoderModel,
    directory: Path,
    seed: int = 0,
    pruning: Optional[dict] = None,
    slim_mask: Optional[dict] = None,
    metadata: Optional[dict] = None,
) -> Path:
    directory = Path(directory)
    entries = []
    chunks = []
    offset = 0
    for name, tensor in model.named_tensors():
        raw = np.ascontiguousarray(tensor.data, dtype=WEIGHT_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": WEIGHT_DTYPE.str,
        **_structure(model),
        "pruning": pruning,
        "slim_mask": slim_mask,
        "seed": seed,
        "fingerprint": model_fingerprint(model),
        "metadata": metadata or {},
        "tensors": entries,
    }

    with checkpoint_lock(directory):
        try:
            with open(directory / WEIGHTS_FILE, "wb") as f:
                for chunk in chunks:
                    f.write(chunk)
            with open(directory / MANIFEST_FILE, "w", encoding="utf-8") as f:
                json.dump(manifest, f, indent=2, sort_keys=True)
        except OSError as e:
            logger.error("checkpoint_save_failed", path=str(directory), error=str(e))
            raise

    logger.info("checkpoint_saved", path=str(directory), tensors=len(entries), nbytes=offset)
    return directory


def read_manifest(directory: Path) -> dict:
    path = Path(directory) / MANIFEST_FILE
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint manifest {path}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r} (expected {FORMAT_VERSION})")
    if manifest.get("dtype") != WEIGHT_DTYPE.str:
        raise CheckpointError(f"unsupported weight dtype {manifest.get('dtype')!r}")
    return manifest


def _read_tensors(directory: Path, manifest: dict) -> dict[str, np.ndarray]:
    path = Path(directory) / WEIGHTS_FILE
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint weights {path}: {e}") from e

    declared = sum(entry["nbytes"] for entry in manifest["tensors"])
    if len(blob) != declared:
        raise CheckpointError(f"weights blob is {len(blob)} bytes, manifest declares {declared}")

    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["offset"] != expected_offset or entry["nbytes"] != count * WEIGHT_DTYPE.itemsize:
            raise CheckpointError(f"manifest entry {entry['name']!r} has inconsistent offset or length")
        data = np.frombuffer(blob, dtype=WEIGHT_DTYPE, count=count, offset=entry["offset"])
        tensors[entry["name"]] = data.reshape(shape).astype(np.float32)
        expected_offset += entry["nbytes"]
    return tensors


def _build_model(manifest: dict, arrays: dict[str, np.ndarray]) -> EncoderModel:
    config = EncoderConfig.model_validate(manifest["config"])
    lora = manifest.get("lora")
    used: set[str] = set()

    def tensor(name: str, trainable: bool = True) -> Tensor:
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        used.add(name)
        return Tensor(arrays[name], requires_grad=trainable)

    def projection(prefix: str, target: str) -> Projection:
        adapter = None
        if f"{prefix}.lora_A" in arrays:
            if lora is None:
                raise CheckpointError(f"{prefix} carries adapter weights but the manifest has no LoRA settings")
            a = tensor(f"{prefix}.lora_A")
            adapter = LoraAdapter(target=target, A=a, B=tensor(f"{prefix}.lora_B"), rank=a.shape[0], alpha=lora["alpha"])
        return Projection(tensor(f"{prefix}.weight"), lora=adapter)

    blocks = []
    for index, layout in enumerate(manifest["blocks"]):
        prefix = f"blocks.{index}"
        attn = attn_norm = mlp = mlp_norm = None
        if layout["attn"]:
            attn_norm = tensor(f"{prefix}.attn_norm")
            attn = AttentionSublayer(
                *(projection(f"{prefix}.attn.{name}", name) for name in ("q_proj", "k_proj", "v_proj", "o_proj")),
                n_heads=config.n_heads,
                n_kv_heads=config.kv_heads,
            )
        if layout["mlp"]:
            mlp_norm = tensor(f"{prefix}.mlp_norm")
            gate = layout.get("gate")
            mlp = GatedMlp(
                *(projection(f"{prefix}.mlp.{name}", name) for name in ("gate_proj", "up_proj", "down_proj")),
                activation=config.activation,
                z=tensor(f"{prefix}.mlp.z", trainable=gate == "trainable") if gate else None,
                gate_frozen=gate == "frozen",
            )
        blocks.append(EncoderBlock(attn=attn, attn_norm=attn_norm, mlp=mlp, mlp_norm=mlp_norm))

    model = EncoderModel(
        config,
        tensor("token_embedding"),
        tensor("position_embedding"),
        blocks,
    )
    unused = set(arrays) - used
    if unused:
        raise CheckpointError(f"checkpoint holds unexpected tensors {sorted(unused)}")
    return model


def load_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    manifest = read_manifest(directory)
    try:
        model = _build_model(manifest, _read_tensors(directory, manifest))
    except CheckpointError:
        logger.error("checkpoint_load_failed", path=str(directory))
        raise
    except (KeyError, TypeError, ValueError) as e:
        logger.error("checkpoint_load_failed", path=str(directory), error=str(e))
        raise CheckpointError(f"malformed checkpoint manifest in {directory}: {e}") from e

    if model_fingerprint(model) != manifest.get("fingerprint"):
        raise CheckpointError(f"checkpoint {directory} does not match its recorded fingerprint")
    logger.info("checkpoint_loaded", path=str(directory), layers=model.n_layers)
    return Checkpoint(model=model, manifest=manifest, path=directory)
