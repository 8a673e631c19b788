"""Dense float32 linear algebra primitives used by every other module.

A "matrix" throughout the package is a 2-D C-contiguous ``numpy.ndarray``
of dtype float32: row-major flat storage, ``shape == (rows, cols)``. The
helpers here validate shapes up front and raise :class:`ShapeError` naming
both operands, so downstream modules never see silent broadcasting.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float32

Matrix = np.ndarray  # 2-D, float32, C-contiguous


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Coerce ``data`` to a float32 C-contiguous 2-D array, validating shape."""
    m = np.ascontiguousarray(data, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got shape {m.shape}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got shape {m.shape}")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product with explicit shape checking."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b, dtype=DTYPE)


def softmax(v) -> np.ndarray:
    """Probability vector from real scores, computed with max-subtraction."""
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0:
        raise ContractError("softmax of an empty vector is undefined")
    if not np.all(np.isfinite(v)):
        raise ContractError("softmax input must be finite")
    e = np.exp(v - np.max(v))
    return (e / e.sum()).astype(DTYPE)


def seeded_random_matrix(
    rows: int,
    cols: int,
    seed: int,
    distribution: str = "gaussian",
    scale: float = 1.0,
) -> Matrix:
    """Deterministic random matrix: same arguments, bitwise-identical output.

    ``distribution`` is ``"gaussian"`` (mean 0, std ``scale``) or
    ``"uniform"`` (on ``(-scale, scale)``). Backed by the counter-based
    Philox generator so draws are reproducible and splittable by seed.
    """
    if rows < 1 or cols < 1:
        raise ContractError(f"matrix dims must be >= 1, got {rows}x{cols}")
    rng = np.random.Generator(np.random.Philox(seed))
    if distribution == "gaussian":
        m = rng.normal(0.0, scale, size=(rows, cols))
    elif distribution == "uniform":
        m = rng.uniform(-scale, scale, size=(rows, cols))
    else:
        raise ContractError(f"unknown distribution {distribution!r}")
    return np.ascontiguousarray(m, dtype=DTYPE)


class StackedTensor3:
    """N matrices of identical shape in one contiguous row-major buffer.

    Slice ``i`` occupies ``[i*rows*cols, (i+1)*rows*cols)`` of the flat
    buffer. The buffer grows geometrically so appends are amortized O(1)
    in slice copies, and removal swaps the last slice into the hole so the
    live region ``data[:n]`` stays contiguous at all times.
    """

    def __init__(self, rows: int, cols: int, capacity: int = 4):
        if rows < 1 or cols < 1:
            raise ContractError(f"slice dims must be >= 1, got {rows}x{cols}")
        self.rows = rows
        self.cols = cols
        self.n = 0
        self._buf = np.zeros((max(capacity, 1), rows, cols), dtype=DTYPE)

    @property
    def data(self) -> np.ndarray:
        """Contiguous [n, rows, cols] view of the live slices."""
        return self._buf[: self.n]

    def append(self, m: Matrix) -> int:
        """Insert a copy of ``m`` as the last slice; returns its index."""
        m = as_matrix(m, self.rows, self.cols)
        if self.n == self._buf.shape[0]:
            grown = np.zeros((2 * self._buf.shape[0], self.rows, self.cols), dtype=DTYPE)
            grown[: self.n] = self._buf[: self.n]
            self._buf = grown
        self._buf[self.n] = m
        self.n += 1
        return self.n - 1

    def get(self, i: int) -> Matrix:
        """Copy of slice ``i``, exactly as inserted."""
        if not 0 <= i < self.n:
            raise ContractError(f"slice index {i} out of range [0, {self.n})")
        return self._buf[i].copy()

    def set(self, i: int, m: Matrix) -> None:
        if not 0 <= i < self.n:
            raise ContractError(f"slice index {i} out of range [0, {self.n})")
        self._buf[i] = as_matrix(m, self.rows, self.cols)

    def swap_remove(self, i: int) -> None:
        """Remove slice ``i`` by moving the last slice into its place."""
        if not 0 <= i < self.n:
            raise ContractError(f"slice index {i} out of range [0, {self.n})")
        last = self.n - 1
        if i != last:
            self._buf[i] = self._buf[last]
        self._buf[last] = 0.0
        self.n = last

    def gather(self, indices) -> np.ndarray:
        """Dense [len(indices), rows, cols] copy of the selected slices."""
        idx = np.asarray(indices, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise ContractError(f"gather indices out of range [0, {self.n})")
        return self._buf[idx]

    def __len__(self) -> int:
        return self.n
