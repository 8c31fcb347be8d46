"""
Utility functions for LCM-lookahead.

Shared helpers used across CLI, training and evaluation layers:
logging setup, named seed streams, content hashing, JSON-lines logs and
image files.
"""

from typing import Any, Dict, Iterable, List, Union
from logging.handlers import RotatingFileHandler
from pathlib import Path
import hashlib
import json
import logging

import numpy as np
import torch
from PIL import Image


# Every RNG consumer in the pipeline draws from one of these named child
# streams of the master seed.
SEED_STREAMS = (
    'dataforge.splits',
    'dataforge.identity.<id>',
    'dataforge.probe',
    'codec',
    'train-base.init',
    'train-base',
    'distill',
    'probe',
    'metrics.identity_loss',
    'metrics.identity_eval',
    'metrics.style',
    'metrics.verify',
    'encoder.init',
    'encoder',
    'encoder.data',
    'probe.pairs',
    'probe.drift',
    'sample',
    'guide/<pair>',
    'eval.cases',
    'eval',
)


def get_log_file_path(log_dir: Union[str, Path]) -> Path:
    """Get the path to the log file inside ``log_dir``."""
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    return log_dir / "lookahead.log"


def setup_logging(log_dir: Union[str, Path], level=logging.INFO) -> Path:
    """
    Configure logging to file with rotation and return the log file path.

    Args:
        log_dir: Directory that receives ``lookahead.log``
        level: Logging level (default: logging.INFO)

    Returns:
        Path to the log file
    """
    log_file = get_log_file_path(log_dir)

    # Max size: 5MB, Backup count: 3
    handler = RotatingFileHandler(
        log_file,
        maxBytes=5*1024*1024,
        backupCount=3,
        encoding='utf-8'
    )

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - [%(levelname)s] - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    handler.setFormatter(formatter)

    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    # Remove existing handlers to avoid duplicates
    if root_logger.hasHandlers():
        root_logger.handlers.clear()

    root_logger.addHandler(handler)

    return log_file


def derive_seed(master_seed: int, name: str) -> int:
    """Derive a 63-bit child seed from the master seed and a stream name."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') & ((1 << 63) - 1)


def seed_stream(master_seed: int, name: str,
                device: Union[str, torch.device] = 'cpu') -> torch.Generator:
    """Create a torch generator for the named child stream.

    Args:
        master_seed: Pipeline master seed
        name: Stream name (see ``SEED_STREAMS``)
        device: Device of the generator

    Returns:
        Seeded ``torch.Generator``
    """
    generator = torch.Generator(device=device)
    generator.manual_seed(derive_seed(master_seed, name))
    return generator



def hash_state_dict(state: Dict[str, torch.Tensor]) -> str:
    """Content hash of a state dict (names, dtypes, shapes and bytes)."""
    h = hashlib.sha256()
    for name in sorted(state.keys()):
        tensor = state[name].detach().cpu().contiguous()
        h.update(name.encode('utf-8'))
        h.update(str(tensor.dtype).encode('utf-8'))
        h.update(str(tuple(tensor.shape)).encode('utf-8'))
        h.update(tensor.numpy().tobytes() if tensor.dtype != torch.bfloat16
                 else tensor.float().numpy().tobytes())
    return h.hexdigest()


def hash_module(module: torch.nn.Module) -> str:
    """Content hash of a module's parameters and buffers."""
    return hash_state_dict(module.state_dict())


def hash_file(path: Union[str, Path]) -> str:
    """sha256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


def hash_payload(payload: Any) -> str:
    """sha256 of canonical JSON."""
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def append_jsonl(path: Union[str, Path], record: Dict[str, Any]):
    """Append one JSON record to a JSON-lines file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'a', encoding='utf-8') as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """Read every record of a JSON-lines file."""
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def tensor_to_uint8(image: torch.Tensor) -> np.ndarray:
    """Convert a CHW tensor in [-1, 1] to an HWC uint8 array."""
    array = ((image.detach().float().clamp(-1, 1) + 1.0) * 127.5).round()
    return array.permute(1, 2, 0).cpu().numpy().astype(np.uint8)


def save_image(image: torch.Tensor, path: Union[str, Path]) -> Path:
    """Save a CHW tensor in [-1, 1] as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(tensor_to_uint8(image)).save(path)
    return path


def save_image_grid(rows: Iterable[Iterable[torch.Tensor]], path: Union[str, Path],
                    pad: int = 2) -> Path:
    """Save a grid of CHW tensors (one list per row) as a single PNG."""
    rows = [[tensor_to_uint8(img) for img in row] for row in rows]
    height, width, channels = rows[0][0].shape
    n_cols = max(len(r) for r in rows)
    canvas = np.full(
        (len(rows) * (height + pad) + pad, n_cols * (width + pad) + pad, channels),
        255, dtype=np.uint8,
    )
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            y = pad + i * (height + pad)
            x = pad + j * (width + pad)
            canvas[y:y + height, x:x + width] = tile
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path)
    return path


def format_duration(seconds: float) -> str:
    """Format a wall time as e.g. ``'1h 02m'``, ``'3m 05s'`` or ``'4.2s'``."""
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, secs = divmod(int(round(seconds)), 60)
    if minutes < 60:
        return f"{minutes}m {secs:02d}s"
    hours, minutes = divmod(minutes, 60)
    return f"{hours}h {minutes:02d}m"


def format_number(value: int, suffix: str = '') -> str:
    """Format number with thousands separator.

    Args:
        value: Integer to format
        suffix: Optional suffix (e.g., ' images')

    Returns:
        Formatted string with commas (e.g., "1,234 images")
    """
    return f"{value:,}{suffix}"
