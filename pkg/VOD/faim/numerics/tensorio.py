# -*- encoding: utf-8 -*-
import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils import DatasetError, ShapeError
from .tensor import Parameters

MAGIC = b'FVT1'
INDEX_FILE = 'index.json'


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype='<f4')
    header = MAGIC + struct.pack('<I', arr.ndim) + struct.pack(f'<{arr.ndim}I', *arr.shape)
    return header + arr.tobytes()


def decode_tensor(raw: bytes) -> np.ndarray:
    if raw[:4] != MAGIC:
        raise DatasetError(f'bad tensor magic {raw[:4]!r}')
    rank = struct.unpack_from('<I', raw, 4)[0]
    dims = struct.unpack_from(f'<{rank}I', raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - offset != 4 * count:
        raise DatasetError(f'tensor payload has {len(raw) - offset} bytes, expected {4 * count}')
    return np.frombuffer(raw, dtype='<f4', count=count, offset=offset).reshape(dims).astype(np.float32)


def save_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    if not Path(path).exists():
        raise FileNotFoundError(f'{path} does not exist.')
    return decode_tensor(Path(path).read_bytes())


def _file_name(name: str) -> str:
    return name.replace('/', '_') + '.fvt'


def save_parameters(directory: Union[str, Path], params: Parameters,
                    extra: Optional[Dict[str, np.ndarray]] = None,
                    meta: Optional[Dict[str, Any]] = None) -> Path:
    """Write one FVT1 file per tensor plus ``index.json``.

    ``extra`` holds auxiliary arrays (momentum buffers) stored under
    ``extra/``; ``meta`` is any JSON-serializable mapping.
    """
    directory = Path(directory)
    (directory / 'extra').mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in params.items():
        save_tensor(directory / _file_name(name), t.data)
        tensors[name] = {'file': _file_name(name), 'shape': list(t.shape)}
    extras = {}
    for name, arr in (extra or {}).items():
        save_tensor(directory / 'extra' / _file_name(name), arr)
        extras[name] = {'file': f'extra/{_file_name(name)}', 'shape': list(arr.shape)}
    index = {'format': 'FVT1', 'rng_seed': params.rng_seed, 'tensors': tensors,
             'extra': extras, 'meta': meta or {}}
    with open(directory / INDEX_FILE, 'w', encoding='utf-8') as f:
        json.dump(index, f, indent=2, sort_keys=True)
    return directory


def read_index(directory: Union[str, Path]) -> Dict[str, Any]:
    index_path = Path(directory) / INDEX_FILE
    if not index_path.exists():
        raise FileNotFoundError(f'{index_path} does not exist.')
    with open(index_path, 'r', encoding='utf-8') as f:
        return json.load(f)


def load_parameters(directory: Union[str, Path], params: Parameters, strict: bool = True,
                    prefixes: Optional[Sequence[str]] = None) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Load tensors into ``params`` in place; returns (extra arrays, meta).

    ``prefixes`` restricts loading to names starting with one of them. With
    ``strict`` every selected parameter of ``params`` must be present in the
    checkpoint. Selected checkpoint tensors unknown to ``params`` are an error.
    """
    directory = Path(directory)
    index = read_index(directory)

    def selected(name: str) -> bool:
        return prefixes is None or name.startswith(tuple(prefixes))

    state = {name: load_tensor(directory / entry['file'])
             for name, entry in index['tensors'].items() if selected(name)}
    if strict:
        missing = sorted(n for n in set(params.names()) - set(state) if selected(n))
        if missing:
            raise ShapeError(f'checkpoint {directory} lacks parameters: {missing[:5]}')
    params.load_state(state)
    extra = {name: load_tensor(directory / entry['file'])
             for name, entry in index.get('extra', {}).items()}
    return extra, index.get('meta', {})
