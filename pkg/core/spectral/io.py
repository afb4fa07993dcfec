import os
from typing import Dict, Tuple

import chex
import numpy as np
import pandas as pd

from core.errors import DumpFormatError
from core.spectral.grid import Grid2

DUMP_MAGIC = b"CSLF"
DUMP_VERSION = 1
DUMP_HEADER = np.dtype([
    ('magic', 'S4'),
    ('version', '<u4'),
    ('n_points', '<u4'),
    ('n_components', '<u4'),
    ('side_length', '<f8'),
    ('reserved', 'V8'),
])
assert DUMP_HEADER.itemsize == 32


def write_field_dump(path: str, grid: Grid2, values: chex.Array) -> None:
    """Writes a field as a raw dump: 32-byte header followed by little-endian float64 values in
    row-major (x_1, x_2, component) order.

    Args:
    - `path`: output file
    - `grid`: grid the field lives on
    - `values`: array of shape (n, n) or (n, n, C)
    """
    values = np.asarray(values, dtype='<f8')
    grid.check_field(values)
    if values.ndim == 2:
        values = values[..., None]
    values = values.reshape(grid.shape + (-1,))
    header = np.zeros((), dtype=DUMP_HEADER)
    header['magic'] = DUMP_MAGIC
    header['version'] = DUMP_VERSION
    header['n_points'] = grid.n
    header['n_components'] = values.shape[-1]
    header['side_length'] = grid.side_length
    with open(path, 'wb') as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(values).tobytes())


def read_field_dump(path: str) -> Tuple[Grid2, np.ndarray]:
    """Reads a dump written by `write_field_dump`.

    Returns:
    - (Grid2, np.ndarray): grid and values of shape (n, n, C)
    """
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < DUMP_HEADER.itemsize:
        raise DumpFormatError(f"{path}: file shorter than the dump header")
    header = np.frombuffer(raw[:DUMP_HEADER.itemsize], dtype=DUMP_HEADER)[0]
    if header['magic'] != DUMP_MAGIC:
        raise DumpFormatError(f"{path}: bad magic {header['magic']!r}")
    if header['version'] != DUMP_VERSION:
        raise DumpFormatError(f"{path}: unsupported dump version {header['version']}")
    n, components = int(header['n_points']), int(header['n_components'])
    body = np.frombuffer(raw[DUMP_HEADER.itemsize:], dtype='<f8')
    if body.size != n * n * components:
        raise DumpFormatError(f"{path}: expected {n * n * components} values, found {body.size}")
    grid = Grid2(n, float(header['side_length']))
    return grid, body.reshape(n, n, components).astype(np.float64)


def write_norms_csv(path: str, norms: Dict[str, float]) -> None:
    """CSV with columns (name, value)."""
    frame = pd.DataFrame({'name': list(norms), 'value': [float(v) for v in norms.values()]})
    frame.to_csv(path, index=False)


def write_table(path: str, rows, columns) -> None:
    """Writes rows as a CSV with the given columns, creating parent directories."""
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)
