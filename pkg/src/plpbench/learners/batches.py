"""Mini-batch views of a design matrix for the neural learners."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..features import N_DENSE, DesignMatrix


@dataclass
class Batch:
    dense: np.ndarray  # (B, 3) standardised demographics
    S: sp.csr_matrix  # (B, n_sparse) indicators of the sparse block
    y: np.ndarray  # (B,) labels as floats
    tokens: np.ndarray | None = None  # (B, L) sparse column ids, -1 = padding


class Prepared:
    """Design matrix converted once for repeated batching.

    ``dense_mean``/``dense_std`` come from the training rows and are stored
    with the model so that inference standardises identically.
    """

    def __init__(self, matrix: DesignMatrix, dense_mean, dense_std, dtype=np.float32,
                 token_rank: np.ndarray | None = None, max_tokens: int | None = None):
        self.n = matrix.n_rows
        self.n_sparse = matrix.n_cols - N_DENSE
        self.dtype = dtype
        self.dense = ((matrix.dense - dense_mean) / dense_std).astype(dtype)
        self.S = sp.csr_matrix(
            (np.ones(matrix.nnz, dtype=dtype), matrix.indices - N_DENSE, matrix.indptr),
            shape=(self.n, self.n_sparse),
        )
        self.S.sort_indices()
        self.y = matrix.labels.astype(dtype)
        self.token_rank = token_rank
        self.max_tokens = max_tokens

    def batch(self, rows: np.ndarray) -> Batch:
        rows = np.asarray(rows)
        S = self.S[rows]
        tokens = None
        if self.token_rank is not None:
            tokens = capped_tokens(S.indptr, S.indices, self.token_rank, self.max_tokens)
        return Batch(self.dense[rows], S, self.y[rows], tokens)


def standardisation(matrix: DesignMatrix) -> tuple[np.ndarray, np.ndarray]:
    mean = matrix.dense.mean(axis=0)
    std = matrix.dense.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def token_priority(matrix: DesignMatrix) -> np.ndarray:
    """Rank of each sparse column: most prevalent first, lower index on ties."""
    prev = matrix.column_prevalence()[N_DENSE:]
    order = np.lexsort((np.arange(len(prev)), -prev))
    rank = np.empty(len(prev), dtype=np.int64)
    rank[order] = np.arange(len(prev))
    return rank


def capped_tokens(indptr, indices, rank: np.ndarray, max_tokens: int) -> np.ndarray:
    """Per-row active columns, at most ``max_tokens`` of them by priority, padded with -1."""
    n = len(indptr) - 1
    counts = np.diff(indptr)
    row = np.repeat(np.arange(n), counts)
    order = np.lexsort((rank[indices], row))
    cols = indices[order]
    pos = np.arange(len(cols)) - np.repeat(indptr[:-1], counts)
    keep = pos < max_tokens
    width = int(min(counts.max(initial=0), max_tokens))
    out = np.full((n, width), -1, dtype=np.int64)
    out[row[keep], pos[keep]] = cols[keep]
    return out
