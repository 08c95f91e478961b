"""Packed symmetric matrix storage (lower triangle, column major)."""

import struct
from functools import lru_cache

import numpy as np
from scipy.linalg import blas as _blas


@lru_cache(maxsize=8)
def _packed_ij(n):
    """(row, col) arrays of packed entries in storage order."""
    cols = np.repeat(np.arange(n), np.arange(n, 0, -1))
    starts = np.concatenate(([0], np.cumsum(np.arange(n, 0, -1))))[:-1]
    rows = np.arange(n * (n + 1) // 2) - starts[cols] + cols
    return rows, cols


class PackedSymmetricMatrix:
    """Symmetric n x n matrix storing only the lower triangle.

    Entry (i, j) with i >= j lives at offset j*n - j*(j-1)/2 + (i - j); the
    layout matches LAPACK's 'L' packed convention, so BLAS dspmv applies
    directly for matrix-vector products.
    """

    def __init__(self, n, data=None):
        self.n = int(n)
        size = self.n * (self.n + 1) // 2
        if data is None:
            self.data = np.zeros(size)
        else:
            data = np.asarray(data, dtype=float)
            if data.size != size:
                raise ValueError(f"packed data length {data.size} != {size}")
            self.data = data

    # ------------------------------------------------------------------
    def _offset(self, i, j):
        i, j = np.maximum(i, j), np.minimum(i, j)
        return j * self.n - (j * (j - 1)) // 2 + (i - j)

    def get(self, i, j):
        return self.data[self._offset(np.asarray(i), np.asarray(j))]

    def set(self, i, j, value):
        self.data[self._offset(np.asarray(i), np.asarray(j))] = value

    def add_block(self, rows, cols, block, both_orientations=True):
        """Scatter-add a dense block at (rows x cols).

        With ``both_orientations`` the transposed block is also added at
        (cols x rows), which is the correct full-matrix semantics for an
        unordered element pair; self-pairs pass False.
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        R = rows[:, None]
        C = cols[None, :]
        mask = R >= C
        off = C * self.n - (C * (C - 1)) // 2 + (R - C)
        np.add.at(self.data, off[mask], block[mask])
        if both_orientations:
            mask2 = C >= R
            off2 = R * self.n - (R * (R - 1)) // 2 + (C - R)
            np.add.at(self.data, off2[mask2], block[mask2])

    # ------------------------------------------------------------------
    def to_full(self):
        full = np.zeros((self.n, self.n))
        i, j = _packed_ij(self.n)
        full[i, j] = self.data
        full[j, i] = self.data
        return full

    @classmethod
    def from_full(cls, full):
        full = np.asarray(full, dtype=float)
        n = full.shape[0]
        i, j = _packed_ij(n)
        return cls(n, full[i, j])

    def matvec(self, x):
        return _blas.dspmv(self.n, 1.0, self.data, np.asarray(x, dtype=float),
                           lower=1)

    def copy(self):
        return PackedSymmetricMatrix(self.n, self.data.copy())

    def frobenius(self):
        i, j = _packed_ij(self.n)
        w = np.where(i == j, 1.0, 2.0)
        return float(np.sqrt(np.sum(w * self.data ** 2)))

    def remap(self, old_positions, new_n):
        """Re-embed entries: dof k of this matrix moves to old_positions[k].

        Entries mapping to negative positions are dropped (removed dofs).
        """
        old_positions = np.asarray(old_positions, dtype=np.int64)
        ii, jj = _packed_ij(self.n)
        ni, nj = old_positions[ii], old_positions[jj]
        keep = (ni >= 0) & (nj >= 0)
        ni, nj, vals = ni[keep], nj[keep], self.data[keep]
        r = np.maximum(ni, nj)
        c = np.minimum(ni, nj)
        out = PackedSymmetricMatrix(new_n)
        off = c * new_n - (c * (c - 1)) // 2 + (r - c)
        out.data[off] = vals
        return out

    def apply_dirichlet(self, mask):
        """Zero the rows/columns of masked dofs, unit diagonal (in place)."""
        idx = np.flatnonzero(mask)
        if len(idx) == 0:
            return self
        ii, jj = _packed_ij(self.n)
        m = np.asarray(mask, dtype=bool)
        kill = m[ii] | m[jj]
        self.data[kill] = 0.0
        diag = idx * self.n - (idx * (idx - 1)) // 2
        self.data[diag] = 1.0
        return self

    def dump(self, path):
        """Debug dump: int64 n then n(n+1)/2 float64 values, little endian."""
        with open(path, "wb") as f:
            f.write(struct.pack("<q", self.n))
            f.write(self.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            (n,) = struct.unpack("<q", f.read(8))
            data = np.frombuffer(f.read(), dtype="<f8")
        return cls(n, data.copy())
