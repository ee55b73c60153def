# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Fused dot-product scan with bounded top-k selection.

One pass over the float32 matrix: each row's score is accumulated in double
precision (sequential, index order), candidates are kept in a k-bounded heap
ordered worst-first by (score ascending, lexicographic rank descending), so
the result matches the full-sort oracle including tie-breaks without
materializing or sorting all n scores.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline bint _worse(double score_a, long lex_a, double score_b, long lex_b) nogil:
    # True when candidate a ranks strictly below candidate b.
    if score_a != score_b:
        return score_a < score_b
    return lex_a > lex_b


def topk_dot(cnp.float32_t[:, ::1] matrix,
             cnp.int64_t[::1] lex_rank,
             cnp.float64_t[::1] query,
             Py_ssize_t k,
             cnp.uint8_t[::1] excluded):
    """Return (row_indices, scores) of the top-k rows by dot product.

    Ties broken by ascending ``lex_rank``. Results are unsorted; the caller
    orders them. ``excluded`` rows are skipped.
    """
    cdef Py_ssize_t n = matrix.shape[0]
    cdef Py_ssize_t d = matrix.shape[1]
    if query.shape[0] != d:
        raise ValueError("query dimension mismatch")
    if k < 1:
        raise ValueError("k must be >= 1")

    heap_scores = np.empty(k, dtype=np.float64)
    heap_lex = np.empty(k, dtype=np.int64)
    heap_idx = np.empty(k, dtype=np.int64)
    cdef cnp.float64_t[::1] hs = heap_scores
    cdef cnp.int64_t[::1] hl = heap_lex
    cdef cnp.int64_t[::1] hi = heap_idx

    cdef Py_ssize_t size = 0
    cdef Py_ssize_t i, j, pos, child, parent
    cdef double s
    cdef long lex
    cdef double tmp_s
    cdef long tmp_l, tmp_i

    with nogil:
        for i in range(n):
            if excluded[i]:
                continue
            s = 0.0
            for j in range(d):
                s += <double> matrix[i, j] * query[j]
            lex = lex_rank[i]
            if size < k:
                # Push and sift up (heap root holds the worst kept candidate).
                pos = size
                hs[pos] = s
                hl[pos] = lex
                hi[pos] = i
                size += 1
                while pos > 0:
                    parent = (pos - 1) >> 1
                    if _worse(hs[pos], hl[pos], hs[parent], hl[parent]):
                        tmp_s = hs[pos]; hs[pos] = hs[parent]; hs[parent] = tmp_s
                        tmp_l = hl[pos]; hl[pos] = hl[parent]; hl[parent] = tmp_l
                        tmp_i = hi[pos]; hi[pos] = hi[parent]; hi[parent] = tmp_i
                        pos = parent
                    else:
                        break
            elif _worse(hs[0], hl[0], s, lex):
                # Replace the worst and sift down.
                hs[0] = s
                hl[0] = lex
                hi[0] = i
                pos = 0
                while True:
                    child = 2 * pos + 1
                    if child >= k:
                        break
                    if child + 1 < k and _worse(hs[child + 1], hl[child + 1],
                                                hs[child], hl[child]):
                        child += 1
                    if _worse(hs[child], hl[child], hs[pos], hl[pos]):
                        tmp_s = hs[pos]; hs[pos] = hs[child]; hs[child] = tmp_s
                        tmp_l = hl[pos]; hl[pos] = hl[child]; hl[child] = tmp_l
                        tmp_i = hi[pos]; hi[pos] = hi[child]; hi[child] = tmp_i
                        pos = child
                    else:
                        break

    return heap_idx[:size], heap_scores[:size]
