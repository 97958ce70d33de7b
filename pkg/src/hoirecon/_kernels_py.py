"""Pure-numpy fallback for the compiled nearest-neighbor kernel.

Chunked over queries to bound the size of the pairwise distance block.
Squared distances are accumulated coordinate-by-coordinate in the same
order as the compiled kernel, and ``argmin`` breaks ties to the lowest
index, so results are bit-identical across backends.
"""

import numpy as np

_CHUNK = 512


def nn_batch(points, queries):
    """Nearest point index and squared distance for each query row."""
    n_q = queries.shape[0]
    idx = np.empty(n_q, dtype=np.int64)
    d2 = np.empty(n_q, dtype=np.float64)
    for start in range(0, n_q, _CHUNK):
        block = queries[start:start + _CHUNK]
        diff = points[np.newaxis, :, :] - block[:, np.newaxis, :]
        dist = diff[:, :, 0] ** 2 + diff[:, :, 1] ** 2 + diff[:, :, 2] ** 2
        best = np.argmin(dist, axis=1)
        idx[start:start + _CHUNK] = best
        d2[start:start + _CHUNK] = dist[np.arange(block.shape[0]), best]
    return idx, d2
