# checkpoint.py
"""
Binary checkpoint:

    b"CFFE" | u32 version | u32 manifest length | manifest (UTF-8 JSON) | tensor data

Manifest = {"tensors": [{name, shape, offset}], "meta": {...}}; offsets are
relative to the start of the data block, every array little-endian float64.
Discriminator tensors live under the "disc." prefix.
"""
import dataclasses
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from corpus import AttributeSpace, Vocabulary
from errors import ArtifactMissingError, ConfigError, ParseError
from io_utils import atomic_path
from models import ContextIndex, GeneratorModel, ModelConfig, build

LOG = logging.getLogger("fairgen.checkpoint")

MAGIC = b"CFFE"
VERSION = 1
DISC_PREFIX = "disc."
_HEADER = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    model: GeneratorModel
    vocab: Vocabulary
    index: ContextIndex
    meta: Dict
    disc_state: Dict[str, torch.Tensor]

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def config_hash(self) -> str:
        return self.meta.get("config_hash", "")


def save_checkpoint(path, model: GeneratorModel, vocab: Vocabulary, index: ContextIndex, config_hash: str = "",
                    step: int = 0, disc: Optional[torch.nn.Module] = None, extra: Optional[Dict] = None) -> Path:
    tensors: List[Tuple[str, torch.Tensor]] = list(model.state_dict().items())
    if disc is not None:
        tensors += [(DISC_PREFIX + k, v) for k, v in disc.state_dict().items()]
    entries, blobs, offset = [], [], 0
    for name, t in tensors:
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)

    space = index.attribute_space
    meta = {
        "model_config": dataclasses.asdict(model.cfg),
        "model_config_hash": model.cfg.content_hash(),
        "config_hash": config_hash,
        "vocab": vocab.to_json(),
        "vocab_hash": vocab.content_hash(),
        "attribute_space": {"name": space.name, "values": list(space.values), "side": space.side},
        "users": sorted(index.user_index, key=index.user_index.get),
        "items": sorted(index.item_index, key=index.item_index.get),
        "step": int(step),
        "disc": None if disc is None else {"in_dim": disc.in_dim, "n_values": disc.n_values, "hidden": disc.hidden},
        "extra": extra or {},
    }
    manifest = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    with atomic_path(path) as tmp, open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
    LOG.info(f"Checkpoint saved: {path} ({len(entries)} tensors, step {step})")
    return Path(path)


def read_manifest(path) -> Tuple[Dict, bytes]:
    path = Path(path)
    if not path.exists():
        raise ArtifactMissingError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ParseError(f"{path.name}: truncated header")
    magic, version, n = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ParseError(f"{path.name}: bad magic {magic!r}")
    if version != VERSION:
        raise ParseError(f"{path.name}: unsupported checkpoint version {version}")
    start = _HEADER.size
    try:
        manifest = json.loads(raw[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"{path.name}: corrupt manifest") from e
    return manifest, raw[start + n:]


def load_checkpoint(path, expect_config_hash: Optional[str] = None,
                    expect_vocab: Optional[Vocabulary] = None) -> Checkpoint:
    """Rebuild the model; rejects stored hashes that disagree with the content or the caller's."""
    manifest, data = read_manifest(path)
    meta = manifest["meta"]
    cfg = ModelConfig(**meta["model_config"])
    if cfg.content_hash() != meta["model_config_hash"]:
        raise ConfigError(f"{Path(path).name}: model config hash mismatch")
    vocab = Vocabulary.from_json(meta["vocab"])
    if vocab.content_hash() != meta["vocab_hash"]:
        raise ConfigError(f"{Path(path).name}: vocabulary hash mismatch")
    if expect_vocab is not None and expect_vocab.content_hash() != meta["vocab_hash"]:
        raise ConfigError(f"{Path(path).name}: vocabulary differs from the current corpus")
    if expect_config_hash is not None and meta.get("config_hash") != expect_config_hash:
        raise ConfigError(f"{Path(path).name}: run config hash mismatch "
                          f"({str(meta.get('config_hash'))[:12]} vs {expect_config_hash[:12]})")

    tensors = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=entry["offset"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())

    model = build(cfg, seed=0)
    state = {k: v for k, v in tensors.items() if not k.startswith(DISC_PREFIX)}
    model.load_state_dict(state)
    space_meta = meta["attribute_space"]
    space = AttributeSpace(space_meta["name"], tuple(space_meta["values"]), space_meta["side"])
    index = ContextIndex.from_lists(meta["users"], meta["items"], space)
    disc_state = {k[len(DISC_PREFIX):]: v for k, v in tensors.items() if k.startswith(DISC_PREFIX)}
    LOG.info(f"Checkpoint loaded: {path} (step {meta.get('step', 0)})")
    return Checkpoint(model, vocab, index, meta, disc_state)
