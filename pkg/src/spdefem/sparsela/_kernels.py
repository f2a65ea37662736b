"""Numba kernels for ordering, symbolic analysis and the numeric factorization.

All kernels take the row-compressed arrays of a symmetric matrix.  Because the
matrix is symmetric, row ``k`` restricted to columns ``<= k`` is the upper
triangular part of column ``k``, which is what the up-looking algorithm needs.
"""

import numpy as np
from numba import njit
from numba.typed import List


@njit(cache=True, nogil=True)
def minimum_degree(indptr, indices, n):
    """Minimum-degree ordering on the explicit elimination graph.

    Ties are broken by the lowest node index, so the ordering is deterministic.
    """
    adj = List()
    degree = np.empty(n, dtype=np.int64)
    for i in range(n):
        cnt = 0
        for p in range(indptr[i], indptr[i + 1]):
            if indices[p] != i:
                cnt += 1
        a = np.empty(cnt, dtype=np.int64)
        k = 0
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            if j != i:
                a[k] = j
                k += 1
        adj.append(a)
        degree[i] = cnt

    done = np.zeros(n, dtype=np.bool_)
    stamp = np.full(n, -1, dtype=np.int64)
    perm = np.empty(n, dtype=np.int64)
    tag = 0
    big = n + 1
    for step in range(n):
        best = -1
        bd = big
        for i in range(n):
            if not done[i] and degree[i] < bd:
                bd = degree[i]
                best = i
                if bd == 0:
                    break
        piv = best
        perm[step] = piv
        done[piv] = True
        nbrs = adj[piv]
        for v in nbrs:
            old = adj[v]
            tag += 1
            tmp = np.empty(old.shape[0] + nbrs.shape[0], dtype=np.int64)
            k = 0
            for w in old:
                if w != piv:
                    tmp[k] = w
                    stamp[w] = tag
                    k += 1
            for w in nbrs:
                if w != v and stamp[w] != tag:
                    tmp[k] = w
                    stamp[w] = tag
                    k += 1
            adj[v] = tmp[:k].copy()
            degree[v] = k
        adj[piv] = np.empty(0, dtype=np.int64)
    return perm


@njit(cache=True, nogil=True)
def etree(indptr, indices, n):
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(indptr[k], indptr[k + 1]):
            i = indices[p]
            while i != -1 and i < k:
                nxt = ancestor[i]
                ancestor[i] = k
                if nxt == -1:
                    parent[i] = k
                i = nxt
    return parent


@njit(cache=True, nogil=True)
def _ereach(indptr, indices, k, parent, stack, mark, n):
    """Nonzero pattern of row ``k`` of the factor, in topological order.

    The pattern is written to ``stack[top:n]`` and ``top`` is returned.
    """
    top = n
    mark[k] = k
    for p in range(indptr[k], indptr[k + 1]):
        i = indices[p]
        if i > k:
            continue
        length = 0
        while mark[i] != k:
            stack[length] = i
            length += 1
            mark[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            stack[top] = stack[length]
    return top


@njit(cache=True, nogil=True)
def column_counts(indptr, indices, parent, n):
    counts = np.ones(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(indptr, indices, k, parent, stack, mark, n)
        for q in range(top, n):
            counts[stack[q]] += 1
    return counts


@njit(cache=True, nogil=True)
def numeric(indptr, indices, data, parent, colptr, n):
    """Up-looking LLᵀ factorization.

    Returns ``(rowind, values, status)``; ``status`` is -1 on success or the
    index of the first non-positive pivot.
    """
    nnz = colptr[n]
    li = np.empty(nnz, dtype=np.int64)
    lx = np.empty(nnz, dtype=np.float64)
    nxt = colptr[:-1].copy()
    x = np.zeros(n, dtype=np.float64)
    stack = np.empty(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(indptr, indices, k, parent, stack, mark, n)
        x[k] = 0.0
        for p in range(indptr[k], indptr[k + 1]):
            i = indices[p]
            if i <= k:
                x[i] += data[p]
        d = x[k]
        x[k] = 0.0
        for q in range(top, n):
            i = stack[q]
            lki = x[i] / lx[colptr[i]]
            x[i] = 0.0
            for p in range(colptr[i] + 1, nxt[i]):
                x[li[p]] -= lx[p] * lki
            d -= lki * lki
            p = nxt[i]
            nxt[i] += 1
            li[p] = k
            lx[p] = lki
        if not d > 0.0:
            return li, lx, k
        p = nxt[k]
        nxt[k] += 1
        li[p] = k
        lx[p] = np.sqrt(d)
    return li, lx, -1


@njit(cache=True, nogil=True)
def forward(colptr, li, lx, b):
    """Solve ``L y = b`` in place for every column of ``b``."""
    n = colptr.shape[0] - 1
    for c in range(b.shape[1]):
        for j in range(n):
            v = b[j, c] / lx[colptr[j]]
            b[j, c] = v
            if v != 0.0:
                for p in range(colptr[j] + 1, colptr[j + 1]):
                    b[li[p], c] -= lx[p] * v


@njit(cache=True, nogil=True)
def backward(colptr, li, lx, b):
    """Solve ``Lᵀ x = b`` in place for every column of ``b``."""
    n = colptr.shape[0] - 1
    for c in range(b.shape[1]):
        for j in range(n - 1, -1, -1):
            v = b[j, c]
            for p in range(colptr[j] + 1, colptr[j + 1]):
                v -= lx[p] * b[li[p], c]
            b[j, c] = v / lx[colptr[j]]
