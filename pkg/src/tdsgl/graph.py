"""Sparse graph matrices: interactions, normalized adjacency, co-occurrence and masks.

Every matrix is a canonical ``scipy.sparse.csr_matrix`` (sorted column
indices, no duplicates, no stored zeros).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import InteractionDataset

SparseMatrix = sp.csr_matrix

CSR_MAGIC = b"TDSGLCSR"
CSR_VERSION = 1
_CSR_HEADER = struct.Struct("<8sIqqq")


def canonical(m) -> sp.csr_matrix:
    m = sp.csr_matrix(m)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return m


def check_csr(m: sp.csr_matrix) -> None:
    """Raise ``ValueError`` unless ``m`` satisfies the CSR layout invariants."""
    indptr, indices = m.indptr, m.indices
    if len(indptr) != m.shape[0] + 1 or indptr[0] != 0 or np.any(np.diff(indptr) < 0):
        raise ValueError("row offsets are not monotone")
    if indptr[-1] != len(indices):
        raise ValueError("row offsets do not match nnz")
    if not np.all(np.isfinite(m.data)):
        raise ValueError("non-finite values")
    for r in range(m.shape[0]):
        cols = indices[indptr[r] : indptr[r + 1]]
        if np.any(np.diff(cols) <= 0):
            raise ValueError(f"column indices not strictly increasing in row {r}")


def build_interaction_matrix(dataset: InteractionDataset) -> sp.csr_matrix:
    """Binary N_U x N_I matrix of the train interactions."""
    pairs = dataset.train
    return interaction_matrix(pairs, dataset.num_users, dataset.num_items)


def interaction_matrix(pairs: np.ndarray, num_users: int, num_items: int) -> sp.csr_matrix:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    r = sp.csr_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(num_users, num_items)
    )
    r.sum_duplicates()
    r.data[:] = 1.0
    r.sort_indices()
    return r


def bipartite_adjacency(r: sp.spmatrix) -> sp.csr_matrix:
    """Symmetric ``[[0, R], [R^T, 0]]``, users first."""
    return canonical(sp.bmat([[None, r], [r.T, None]], format="csr"))


def symmetric_normalize(a: sp.spmatrix) -> sp.csr_matrix:
    """``D^-1/2 A D^-1/2`` with D the row sums; zero-degree rows stay empty."""
    a = sp.csr_matrix(a, dtype=np.float64)
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = deg[nz] ** -0.5
    d = sp.diags(inv_sqrt)
    return canonical(d @ a @ d)


def build_normalized_adjacency(r: sp.spmatrix, with_self_loop: bool = True) -> sp.csr_matrix:
    a = bipartite_adjacency(r)
    if with_self_loop:
        a = a + sp.identity(a.shape[0], format="csr")
    return symmetric_normalize(a)


def build_cooccurrence(r: sp.spmatrix) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Shared-item counts between users and shared-user counts between items."""
    r = sp.csr_matrix(r, dtype=np.int64)
    return canonical(r @ r.T), canonical(r.T @ r)


class ComplementMask:
    """0/1 negative mask held as the complement of a sparse false-negative set.

    ``m(u, v) = 1`` for ``u != v`` unless ``f(u, v) = 1``; the diagonal is
    ``m(u, u) = 1`` iff the node's self co-occurrence is below the threshold.
    """

    # masks up to this many entries are also cached as a dense boolean array
    DENSE_LIMIT = 25_000_000

    def __init__(self, f: sp.csr_matrix, self_negative: np.ndarray):
        self.f = f
        self.self_negative = np.asarray(self_negative, dtype=bool)
        self.shape = f.shape
        self._dense = None
        if self.shape[0] * self.shape[1] <= self.DENSE_LIMIT:
            self._dense = self._sparse_block(np.arange(self.shape[0]), np.arange(self.shape[1]))

    def block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if self._dense is not None:
            return self._dense[np.ix_(rows, cols)]
        return self._sparse_block(rows, cols)

    def _sparse_block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        out = ~self.f[rows][:, cols].toarray().astype(bool)
        same = rows[:, None] == cols[None, :]
        if same.any():
            out[same] = np.broadcast_to(self.self_negative[rows][:, None], same.shape)[same]
        return out

    def toarray(self) -> np.ndarray:
        n = self.shape[0]
        return self.block(np.arange(n), np.arange(n)).astype(np.int64)

    def nnz_complement(self) -> int:
        """Number of zero entries of the mask."""
        return int(self.f.nnz + np.count_nonzero(~self.self_negative))


def build_masks(p: sp.csr_matrix, beta: int) -> tuple[ComplementMask, sp.csr_matrix]:
    """Threshold a co-occurrence matrix into a negative mask ``m`` and false negatives ``f``.

    ``m(u, v) = [p(u, v) < beta]`` (diagonal included) and
    ``f(u, v) = [p(u, v) >= beta and u != v]``.
    """
    if int(beta) != beta or beta < 1:
        raise ValueError(f"beta must be an integer >= 1, got {beta!r}")
    p = sp.csr_matrix(p)
    coo = p.tocoo()
    keep = (coo.row != coo.col) & (coo.data >= beta)
    f = canonical(
        sp.csr_matrix(
            (np.ones(int(keep.sum())), (coo.row[keep], coo.col[keep])), shape=p.shape
        )
    )
    self_negative = p.diagonal() < beta
    return ComplementMask(f, self_negative), f


@dataclass(frozen=True, eq=False)
class CoOccurrenceMasks:
    p_user: sp.csr_matrix
    p_item: sp.csr_matrix
    m_user: ComplementMask
    m_item: ComplementMask
    f_user: sp.csr_matrix
    f_item: sp.csr_matrix
    beta: int
    beta_item: int


def build_cooccurrence_masks(
    r: sp.spmatrix, beta: int, beta_item: int | None = None
) -> CoOccurrenceMasks:
    """Co-occurrence matrices plus masks; ``beta_item`` overrides the item-side threshold."""
    beta_item = beta if beta_item is None else beta_item
    p_user, p_item = build_cooccurrence(r)
    m_user, f_user = build_masks(p_user, beta)
    m_item, f_item = build_masks(p_item, beta_item)
    return CoOccurrenceMasks(p_user, p_item, m_user, m_item, f_user, f_item, beta, beta_item)


def masks_from_cooccurrence(
    p_user: sp.csr_matrix, p_item: sp.csr_matrix, beta: int, beta_item: int | None = None
) -> CoOccurrenceMasks:
    beta_item = beta if beta_item is None else beta_item
    m_user, f_user = build_masks(p_user, beta)
    m_item, f_item = build_masks(p_item, beta_item)
    return CoOccurrenceMasks(p_user, p_item, m_user, m_item, f_user, f_item, beta, beta_item)


# -- binary container --------------------------------------------------------


def dumps_csr(m: sp.csr_matrix) -> bytes:
    m = sp.csr_matrix(m)
    header = _CSR_HEADER.pack(CSR_MAGIC, CSR_VERSION, m.shape[0], m.shape[1], m.nnz)
    return b"".join(
        [
            header,
            m.indptr.astype("<i8").tobytes(),
            m.indices.astype("<i8").tobytes(),
            m.data.astype("<f8").tobytes(),
        ]
    )


def loads_csr(buf: bytes) -> sp.csr_matrix:
    if len(buf) < _CSR_HEADER.size:
        raise ValueError("truncated matrix container")
    magic, version, rows, cols, nnz = _CSR_HEADER.unpack_from(buf)
    if magic != CSR_MAGIC:
        raise ValueError("not a matrix container (bad magic)")
    if version != CSR_VERSION:
        raise ValueError(f"unsupported matrix container version {version}")
    expected = _CSR_HEADER.size + 8 * (rows + 1) + 16 * nnz
    if len(buf) != expected:
        raise ValueError(f"matrix container has {len(buf)} bytes, expected {expected}")
    off = _CSR_HEADER.size
    indptr = np.frombuffer(buf, dtype="<i8", count=rows + 1, offset=off)
    off += 8 * (rows + 1)
    indices = np.frombuffer(buf, dtype="<i8", count=nnz, offset=off)
    off += 8 * nnz
    data = np.frombuffer(buf, dtype="<f8", count=nnz, offset=off)
    return sp.csr_matrix((data.copy(), indices.copy(), indptr.copy()), shape=(rows, cols))


def save_csr(path: str, m: sp.csr_matrix) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_csr(m))


def load_csr(path: str) -> sp.csr_matrix:
    with open(path, "rb") as fh:
        return loads_csr(fh.read())
