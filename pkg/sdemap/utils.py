"""Utils module: finite differences, smooth clamping, seeding and persistence."""

import hashlib
import json
import os
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from sdemap.errors import InputError

# Recorded in every simulation's metadata so runs can be reproduced bit-for-bit.
RNG_METADATA = {
    'bit_generator': 'Philox-4x64-10 (counter-based, numpy.random.Philox)',
    'normal_method': 'ziggurat (numpy.random.Generator.standard_normal)',
    'stream_derivation': 'numpy.random.SeedSequence(seed).spawn',
}

CLAMP_MARGIN_FRACTION = 0.1
FLOAT_FORMAT = '%.17g'


def fd_steps(x: np.ndarray, rel: float = 1e-6, floor: float = 1e-6) -> np.ndarray:
    """Per-coordinate central-difference steps max(floor, rel * |x_i|)."""
    return np.maximum(floor, rel * np.abs(np.asarray(x, dtype=float)))


def central_difference(fun: Callable[[np.ndarray], Any], x: np.ndarray,
                       steps: Optional[np.ndarray] = None) -> np.ndarray:
    """Central-difference derivative of ``fun`` at the flat point ``x``.

    Args:
        fun (Callable): Map from a 1-D array to a scalar or an array.
        x (np.ndarray): Point of evaluation.
        steps (Optional[np.ndarray]): Per-coordinate steps; defaults to
            :func:`fd_steps`.

    Returns:
        np.ndarray: Array of shape ``out_shape + (len(x),)``; for scalar maps
            this is the gradient.
    """
    x = np.asarray(x, dtype=float)
    if steps is None:
        steps = fd_steps(x)
    columns = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = steps[i]
        forward = np.asarray(fun(x + e), dtype=float)
        backward = np.asarray(fun(x - e), dtype=float)
        columns.append((forward - backward) / (2.0 * steps[i]))
    if not columns:
        out = np.asarray(fun(x), dtype=float)
        return np.zeros(out.shape + (0,))
    return np.stack(columns, axis=-1)


def smooth_clamp(u: np.ndarray, lo: np.ndarray, hi: np.ndarray
                 ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clamp ``u`` into ``[lo, hi]`` with a cosine taper outside the box.

    The map is the identity inside the box. Over a margin of 10 % of the box
    width its slope falls from 1 to 0 as ``(1 + cos(pi r)) / 2`` and it is
    constant beyond, which makes it twice continuously differentiable.

    Args:
        u (np.ndarray): Values, last axis aligned with ``lo`` and ``hi``.
        lo (np.ndarray): Lower box edges.
        hi (np.ndarray): Upper box edges.

    Returns:
        Tuple[np.ndarray, np.ndarray, np.ndarray]: Clamped value, first and
            second derivative, each with the shape of ``u``.
    """
    u = np.asarray(u, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), u.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), u.shape)
    width = CLAMP_MARGIN_FRACTION * (hi - lo)

    value = u.copy()
    d1 = np.ones_like(u)
    d2 = np.zeros_like(u)

    above = u > hi
    if np.any(above):
        r = np.minimum((u[above] - hi[above]) / width[above], 1.0)
        w = width[above]
        value[above] = hi[above] + w * (r / 2.0 + np.sin(np.pi * r) / (2.0 * np.pi))
        d1[above] = 0.5 * (1.0 + np.cos(np.pi * r))
        d2[above] = -np.pi * np.sin(np.pi * r) / (2.0 * w)

    below = u < lo
    if np.any(below):
        r = np.minimum((lo[below] - u[below]) / width[below], 1.0)
        w = width[below]
        value[below] = lo[below] - w * (r / 2.0 + np.sin(np.pi * r) / (2.0 * np.pi))
        d1[below] = 0.5 * (1.0 + np.cos(np.pi * r))
        d2[below] = np.pi * np.sin(np.pi * r) / (2.0 * w)

    return value, d1, d2


def make_generator(seed: int) -> np.random.Generator:
    """Counter-based generator seeded with an explicit 64-bit integer."""
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn_generators(seed: int, count: int) -> List[np.random.Generator]:
    """Independent child generators derived from ``seed`` by SeedSequence."""
    children = np.random.SeedSequence(int(seed)).spawn(count)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy scalars and arrays into JSON-native types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def canonical_json(obj: Any) -> str:
    """Key-sorted, whitespace-free JSON used for hashing."""
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(',', ':'))


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 hex digest of the canonical JSON form of ``config``."""
    return hashlib.sha256(canonical_json(config).encode('utf-8')).hexdigest()


def write_json(path: str, obj: Any) -> None:
    """Write ``obj`` as indented UTF-8 JSON with sorted keys and a final LF."""
    _ensure_parent(path)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(json.dumps(to_jsonable(obj), indent=2, sort_keys=True))
        f.write('\n')


def read_json(path: str) -> Any:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def write_csv(path: str, header: Sequence[str], rows: np.ndarray) -> None:
    """Write a numeric table as comma-separated text with 17 significant digits.

    Args:
        path (str): Destination file.
        header (Sequence[str]): Column names, written as the first row.
        rows (np.ndarray): 2-D array with ``len(header)`` columns.
    """
    _ensure_parent(path)
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size == 0:
        rows = rows.reshape(0, len(header))
    np.savetxt(path, rows, fmt=FLOAT_FORMAT, delimiter=',',
               header=','.join(header), comments='', newline='\n',
               encoding='utf-8')


def read_csv(path: str) -> Tuple[List[str], np.ndarray]:
    """Read a table written by :func:`write_csv`; returns (header, rows).

    Raises:
        InputError: A row that is not numeric or has the wrong column count.
    """
    with open(path, 'r', encoding='utf-8') as f:
        header = f.readline().strip().split(',')
    try:
        rows = np.loadtxt(path, delimiter=',', skiprows=1, ndmin=2, encoding='utf-8')
        return header, rows.reshape(-1, len(header))
    except ValueError as exc:
        raise InputError(f'{path}: malformed CSV table ({exc})') from exc


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
