"""Block-Hankel-matrix (BHM) pruning codec.

A matrix is cut into ``l x l`` blocks (row-major over the block grid) and
each block is replaced by its nearest Hankel matrix, stored as the
``2l - 1`` anti-diagonal values. Because every party lays the sequence
vectors out identically, compressed updates add positionwise with no
index information, which is what lets them be summed under encryption.

The CSR helpers at the bottom exist to show why index-based sparse
formats cannot be aggregated blindly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_BHM_MAGIC = b"SEFLBHM1"
_HEADER = struct.Struct("<8sQQIdII")


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class BhmParams:
    block_size: int = 2
    scaling_factor: float = 1.0

    def __post_init__(self):
        if int(self.block_size) != self.block_size or self.block_size < 2:
            raise ValueError(f"block_size must be an integer >= 2, got {self.block_size}")
        if not self.scaling_factor > 0:
            raise ValueError(f"scaling_factor must be > 0, got {self.scaling_factor}")

    @property
    def seq_len(self) -> int:
        return 2 * self.block_size - 1

    @property
    def compression_ratio(self) -> float:
        """Stored values per dense value, ``(2l-1)/l^2``."""
        return self.seq_len / self.block_size**2


def grid_shape(rows: int, cols: int, l: int) -> tuple[int, int]:
    return -(-rows // l), -(-cols // l)


@lru_cache(maxsize=64)
def _antidiag_index(l: int) -> np.ndarray:
    i, j = np.indices((l, l))
    idx = (i + j).ravel()
    idx.setflags(write=False)
    return idx


@dataclass(frozen=True)
class Partition:
    blocks: np.ndarray  # (n_blocks, l, l)
    mask: np.ndarray  # (n_blocks, l, l) bool, False on padding
    rows: int
    cols: int
    grid: tuple[int, int]

    @property
    def padding(self) -> tuple[int, int]:
        l = self.blocks.shape[1]
        return self.grid[0] * l - self.rows, self.grid[1] * l - self.cols


def _to_blocks(padded: np.ndarray, l: int, grid: tuple[int, int]) -> np.ndarray:
    gr, gc = grid
    return padded.reshape(gr, l, gc, l).transpose(0, 2, 1, 3).reshape(gr * gc, l, l)


def _from_blocks(blocks: np.ndarray, l: int, grid: tuple[int, int]) -> np.ndarray:
    gr, gc = grid
    return blocks.reshape(gr, gc, l, l).transpose(0, 2, 1, 3).reshape(gr * l, gc * l)


def partition(matrix: np.ndarray, l: int) -> Partition:
    """Zero-pad ``matrix`` on the bottom/right and cut it into ``l x l`` blocks."""
    if l < 2:
        raise ValueError(f"block size must be >= 2, got {l}")
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    rows, cols = m.shape
    grid = grid_shape(rows, cols, l)
    padded = np.zeros((grid[0] * l, grid[1] * l))
    padded[:rows, :cols] = m
    inside = np.zeros(padded.shape, dtype=bool)
    inside[:rows, :cols] = True
    return Partition(
        blocks=_to_blocks(padded, l, grid),
        mask=_to_blocks(inside, l, grid),
        rows=rows,
        cols=cols,
        grid=grid,
    )


def assemble(blocks: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`partition`: stitch blocks back and drop padding."""
    l = blocks.shape[1]
    grid = grid_shape(rows, cols, l)
    return _from_blocks(np.asarray(blocks, dtype=float), l, grid)[:rows, :cols].copy()


def project_blocks(blocks: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Anti-diagonal means of a stack of blocks, shape ``(n, 2l-1)``.

    With a mask, only unmasked cells are averaged; an anti-diagonal with no
    live cells gets 0. This is the least-squares Hankel fit to the live
    entries, and reduces to the plain projection when nothing is padded.
    """
    blocks = np.asarray(blocks, dtype=float)
    nb, l, _ = blocks.shape
    idx = _antidiag_index(l)
    flat = blocks.reshape(nb, l * l)
    if mask is None:
        weights = np.ones((nb, l * l))
    else:
        weights = np.asarray(mask, dtype=float).reshape(nb, l * l)
    indicator = np.zeros((l * l, 2 * l - 1))
    indicator[np.arange(l * l), idx] = 1.0
    sums = (flat * weights) @ indicator
    counts = weights @ indicator
    out = np.zeros_like(sums)
    np.divide(sums, counts, out=out, where=counts > 0)
    return out


def project_block(block: np.ndarray) -> np.ndarray:
    b = np.asarray(block, dtype=float)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise ValueError(f"expected a square block, got shape {b.shape}")
    return project_blocks(b[None])[0]


def reconstruct_blocks(seqs: np.ndarray, l: int) -> np.ndarray:
    seqs = np.asarray(seqs, dtype=float)
    if seqs.ndim != 2 or seqs.shape[1] != 2 * l - 1:
        raise ValueError(f"sequence vectors must have length {2 * l - 1}, got shape {seqs.shape}")
    return seqs[:, _antidiag_index(l)].reshape(seqs.shape[0], l, l)


def reconstruct_block(g: np.ndarray, l: int) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.shape != (2 * l - 1,):
        raise ValueError(f"sequence vector must have length {2 * l - 1}, got {g.shape}")
    return reconstruct_blocks(g[None], l)[0]


@dataclass(frozen=True)
class BhmUpdate:
    """A compressed matrix: one length-``2l-1`` sequence vector per block."""

    rows: int
    cols: int
    block_size: int
    scaling_factor: float
    seq_vectors: np.ndarray  # (n_blocks, 2l-1), row-major over the grid

    def __post_init__(self):
        seqs = np.asarray(self.seq_vectors, dtype=float)
        gr, gc = grid_shape(self.rows, self.cols, self.block_size)
        if seqs.shape != (gr * gc, 2 * self.block_size - 1):
            raise ShapeMismatchError(
                f"seq_vectors shape {seqs.shape} does not match grid {gr}x{gc} with l={self.block_size}"
            )
        seqs = seqs.copy()
        seqs.setflags(write=False)
        object.__setattr__(self, "seq_vectors", seqs)

    @property
    def block_grid(self) -> tuple[int, int]:
        return grid_shape(self.rows, self.cols, self.block_size)

    @property
    def stored_count(self) -> int:
        return self.seq_vectors.size

    def flat(self) -> np.ndarray:
        return self.seq_vectors.ravel().copy()

    def with_values(self, flat: np.ndarray) -> "BhmUpdate":
        """Same layout, new sequence values (e.g. after decryption)."""
        return BhmUpdate(
            self.rows,
            self.cols,
            self.block_size,
            self.scaling_factor,
            np.asarray(flat, dtype=float).reshape(self.seq_vectors.shape),
        )

    def layout_key(self) -> tuple:
        return (self.rows, self.cols, self.block_size, self.scaling_factor)

    def __eq__(self, other):
        if not isinstance(other, BhmUpdate):
            return NotImplemented
        return self.layout_key() == other.layout_key() and np.array_equal(
            self.seq_vectors, other.seq_vectors
        )

    __hash__ = None

    def to_bytes(self) -> bytes:
        gr, gc = self.block_grid
        header = _HEADER.pack(
            _BHM_MAGIC, self.rows, self.cols, self.block_size, self.scaling_factor, gr, gc
        )
        return header + self.seq_vectors.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "BhmUpdate":
        magic, rows, cols, l, kappa, gr, gc = _HEADER.unpack_from(buf, 0)
        if magic != _BHM_MAGIC:
            raise ValueError("bad BHM magic")
        if (gr, gc) != grid_shape(rows, cols, l):
            raise ValueError("BHM header grid inconsistent with shape")
        body = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size)
        expected = gr * gc * (2 * l - 1)
        if body.size != expected:
            raise ValueError(f"BHM body has {body.size} values, expected {expected}")
        return cls(rows, cols, l, kappa, body.reshape(gr * gc, 2 * l - 1).astype(float))


def compress(matrix: np.ndarray, params: BhmParams) -> BhmUpdate:
    part = partition(matrix, params.block_size)
    seqs = project_blocks(params.scaling_factor * part.blocks, part.mask)
    return BhmUpdate(part.rows, part.cols, params.block_size, params.scaling_factor, seqs)


def decompress(update: BhmUpdate, shape: tuple[int, int] | None = None) -> np.ndarray:
    if shape is not None and tuple(shape) != (update.rows, update.cols):
        raise ShapeMismatchError(f"update is {update.rows}x{update.cols}, expected {shape}")
    blocks = reconstruct_blocks(update.seq_vectors, update.block_size)
    return assemble(blocks, update.rows, update.cols) / update.scaling_factor


def zeros_like_layout(rows: int, cols: int, params: BhmParams) -> BhmUpdate:
    gr, gc = grid_shape(rows, cols, params.block_size)
    return BhmUpdate(rows, cols, params.block_size, params.scaling_factor, np.zeros((gr * gc, params.seq_len)))


def add_bhm(a: BhmUpdate, b: BhmUpdate) -> BhmUpdate:
    if a.layout_key() != b.layout_key():
        raise ShapeMismatchError(f"cannot add BHM updates with layouts {a.layout_key()} and {b.layout_key()}")
    return a.with_values(a.seq_vectors + b.seq_vectors)


def approximation_error(matrix: np.ndarray, params: BhmParams) -> float:
    """Frobenius norm of what the BHM round trip loses."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    return float(np.linalg.norm(m - decompress(compress(m, params))))


# ---------------------------------------------------------------------------
# CSR pitfall demonstration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsrUpdate:
    values: np.ndarray
    col_indices: np.ndarray
    row_pointers: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        rp = np.asarray(self.row_pointers)
        ci = np.asarray(self.col_indices)
        rows, cols = self.shape
        if rp.shape != (rows + 1,) or rp[0] != 0 or np.any(np.diff(rp) < 0):
            raise ValueError("row_pointers must be monotone, start at 0 and have rows+1 entries")
        if rp[-1] != len(self.values) or len(ci) != len(self.values):
            raise ValueError("values/col_indices length disagrees with row_pointers")
        if ci.size and (ci.min() < 0 or ci.max() >= cols):
            raise ValueError("column index out of range")

    @classmethod
    def from_dense(cls, matrix: np.ndarray) -> "CsrUpdate":
        m = np.asarray(matrix, dtype=float)
        r, c = np.nonzero(m)
        counts = np.bincount(r, minlength=m.shape[0])
        return cls(
            values=m[r, c],
            col_indices=c,
            row_pointers=np.concatenate([[0], np.cumsum(counts)]),
            shape=m.shape,
        )

    @property
    def nnz(self) -> int:
        return len(self.values)

    def pattern(self) -> tuple[tuple[int, int], ...]:
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.row_pointers))
        return tuple(zip(rows.tolist(), np.asarray(self.col_indices).tolist()))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.row_pointers))
        out[rows, self.col_indices] = self.values
        return out


@dataclass(frozen=True)
class CsrPitfallReport:
    patterns_aligned: bool
    blind_sum: np.ndarray | None  # None when nnz differ: arrays cannot even be added
    true_sum: np.ndarray
    blind_matches_truth: bool
    coincidence: bool
    bhm_sum: np.ndarray
    bhm_projected_truth: np.ndarray
    bhm_matches_truth: bool

    def summary(self) -> str:
        if self.blind_sum is None:
            csr = "CSR: value arrays differ in length, blind addition undefined"
        elif self.blind_matches_truth:
            csr = "CSR: blind addition matches the true sum" + (
                " (coincidence: sparsity patterns are aligned)" if self.coincidence else ""
            )
        else:
            csr = "CSR: blind addition of value arrays does NOT equal the true sum"
        bhm = "BHM: positionwise addition equals the sum of projections" if self.bhm_matches_truth else (
            "BHM: positionwise addition diverged from the sum of projections"
        )
        return f"{csr}; {bhm}"


def demonstrate_csr_pitfall(a: CsrUpdate, b: CsrUpdate, block_size: int = 2) -> CsrPitfallReport:
    """Add two CSR updates the only way an encrypted aggregator can.

    With indices hidden, only the value arrays can be summed positionwise;
    the result is read back through the first update's index structure. The
    same matrices are also pushed through BHM for comparison.
    """
    if a.shape != b.shape:
        raise ShapeMismatchError(f"CSR shapes differ: {a.shape} vs {b.shape}")
    aligned = a.pattern() == b.pattern()
    true_sum = a.to_dense() + b.to_dense()
    if a.nnz == b.nnz:
        blind = CsrUpdate(
            values=np.asarray(a.values) + np.asarray(b.values),
            col_indices=a.col_indices,
            row_pointers=a.row_pointers,
            shape=a.shape,
        ).to_dense()
        matches = bool(np.array_equal(blind, true_sum))
    else:
        blind = None
        matches = False

    params = BhmParams(block_size=block_size)
    ba, bb = compress(a.to_dense(), params), compress(b.to_dense(), params)
    bhm_sum = decompress(add_bhm(ba, bb))
    projected_truth = decompress(ba) + decompress(bb)
    return CsrPitfallReport(
        patterns_aligned=aligned,
        blind_sum=blind,
        true_sum=true_sum,
        blind_matches_truth=matches,
        coincidence=matches and aligned,
        bhm_sum=bhm_sum,
        bhm_projected_truth=projected_truth,
        bhm_matches_truth=bool(np.array_equal(bhm_sum, projected_truth)),
    )
