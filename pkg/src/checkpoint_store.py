"""
Checkpoint persistence for training runs.

A checkpoint is one ``.npz`` archive:
  - ``header``: UTF-8 JSON (format version, config, vocabulary, RNG state,
    epoch/step/data counters, Adam step, phase, best dev NLL)
  - ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>``, ``buffer/<name>``:
    float64 blocks
  - ``clusters``: K × d cluster centers when the model has them

Writes go to a temp file first and are moved into place with ``os.replace``.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from rnf_utils import ContractError

logger = logging.getLogger('checkpoint_store')

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to resume a run bit-for-bit."""
    config: Dict[str, object]
    vocab: List[str]
    rng_state: Dict[str, object]
    epoch: int
    step: int
    data_pass: int
    batch_in_pass: int
    adam_step: int
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    clusters: Optional[np.ndarray] = None
    phase: str = 'main'
    best_dev: Optional[float] = None


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Persist a checkpoint atomically."""
    header = {
        'format_version': FORMAT_VERSION,
        'config': ckpt.config,
        'vocab': ckpt.vocab,
        'rng_state': ckpt.rng_state,
        'epoch': ckpt.epoch,
        'step': ckpt.step,
        'data_pass': ckpt.data_pass,
        'batch_in_pass': ckpt.batch_in_pass,
        'adam_step': ckpt.adam_step,
        'phase': ckpt.phase,
        'best_dev': ckpt.best_dev,
        'shapes': {name: list(arr.shape) for name, arr in ckpt.params.items()},
    }
    arrays = {'header': np.frombuffer(json.dumps(header).encode('utf-8'), dtype=np.uint8)}
    for prefix, blocks in (('param', ckpt.params), ('adam_m', ckpt.adam_m),
                           ('adam_v', ckpt.adam_v), ('buffer', ckpt.buffers)):
        for name, arr in blocks.items():
            arrays[f"{prefix}/{name}"] = np.asarray(arr, dtype=np.float64)
    if ckpt.clusters is not None:
        arrays['clusters'] = np.asarray(ckpt.clusters, dtype=np.float64)

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = path + '.tmp'
    with open(tmp_path, 'wb') as f:
        np.savez(f, **arrays)
    os.replace(tmp_path, path)
    logger.info(f"💾 Saved checkpoint (epoch {ckpt.epoch}, step {ckpt.step}) to {path}")


def load_checkpoint(path: str) -> Checkpoint:
    """Read a checkpoint written by ``save_checkpoint``."""
    if not os.path.isfile(path):
        raise ContractError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        header = json.loads(archive['header'].tobytes().decode('utf-8'))
        if header.get('format_version') != FORMAT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint format {header.get('format_version')}")
        blocks: Dict[str, Dict[str, np.ndarray]] = {'param': {}, 'adam_m': {}, 'adam_v': {}, 'buffer': {}}
        clusters = None
        for key in archive.files:
            if key == 'header':
                continue
            if key == 'clusters':
                clusters = archive[key].copy()
                continue
            prefix, _, name = key.partition('/')
            blocks[prefix][name] = archive[key].copy()

    for name, shape in header['shapes'].items():
        if list(blocks['param'].get(name, np.empty(0)).shape) != shape:
            raise ContractError(f"{path}: parameter '{name}' does not have shape {shape}")
    logger.info(f"📂 Loaded checkpoint (epoch {header['epoch']}, step {header['step']}) from {path}")
    return Checkpoint(
        config=header['config'], vocab=header['vocab'], rng_state=header['rng_state'],
        epoch=header['epoch'], step=header['step'], data_pass=header['data_pass'],
        batch_in_pass=header['batch_in_pass'], adam_step=header['adam_step'],
        params=blocks['param'], adam_m=blocks['adam_m'], adam_v=blocks['adam_v'],
        buffers=blocks['buffer'], clusters=clusters, phase=header.get('phase', 'main'),
        best_dev=header.get('best_dev'),
    )
