"""Differentiable permutation machinery.

The Sinkhorn operator drives a positive matrix toward the doubly-stochastic
polytope by alternating row and column normalization; run on exp(logits/tau)
it sharpens toward a permutation matrix as tau shrinks.  The permutation
network maps a set to per-input logits whose Sinkhorn image acts as a soft
permutation.  Hard matchings (Hungarian, greedy rounding) exist for
validation and diagnostics; training never hardens.
"""

from __future__ import annotations

import numpy as np

from spanlab.nn import xavier_init
from spanlab.tensor import DomainError, ShapeMismatch, Tensor

__all__ = [
    "PermMatrix",
    "PermutationNetwork",
    "apply_soft",
    "greedy_round",
    "hard_match",
    "is_doubly_stochastic",
    "sinkhorn",
]


class PermMatrix:
    """A hard permutation: pi[i] is the source row index for output row i."""

    __slots__ = ("pi",)

    def __init__(self, pi):
        pi = np.asarray(pi, dtype=np.int64)
        n = pi.shape[0]
        if pi.ndim != 1 or not np.array_equal(np.sort(pi), np.arange(n)):
            raise ValueError(f"PermMatrix: {pi!r} is not a permutation")
        self.pi = pi

    def __len__(self):
        return self.pi.shape[0]

    def __eq__(self, other):
        return isinstance(other, PermMatrix) and np.array_equal(self.pi, other.pi)

    def __repr__(self):
        return f"PermMatrix({self.pi.tolist()})"

    def inverse(self):
        return PermMatrix(np.argsort(self.pi, kind="stable"))

    def to_matrix(self):
        """0/1 matrix P with P[pi[i], i] = 1, so that P^T X reindexes rows."""
        n = len(self)
        mat = np.zeros((n, n))
        mat[self.pi, np.arange(n)] = 1.0
        return mat

    def apply(self, x):
        """Row reindexing: output row i is x[pi[i]]."""
        return np.asarray(x)[self.pi]


def sinkhorn(logits, temperature, iterations):
    """Doubly-stochastic projection of exp(logits/temperature).

    Runs ``iterations`` rounds of row normalization followed by column
    normalization, in log space for stability; fully differentiable by
    unrolling.  Accepts an (n,n) matrix or a (B,n,n) batch.
    """
    if temperature <= 0.0:
        raise DomainError(f"sinkhorn: temperature {temperature} must be positive")
    if iterations < 1:
        raise DomainError(f"sinkhorn: iterations {iterations} must be >= 1")
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    shape = logits.shape
    if len(shape) not in (2, 3) or shape[-1] != shape[-2] or shape[-1] == 0:
        raise ShapeMismatch("sinkhorn", shape)
    if not np.isfinite(logits.data).all():
        raise DomainError("sinkhorn: logits must be finite")

    row_axis = len(shape) - 1  # normalize across columns -> unit row sums
    col_axis = len(shape) - 2
    n = shape[-1]
    reps_row = (1,) * (len(shape) - 1) + (n,)
    reps_col = (1,) * (len(shape) - 2) + (n, 1)

    log_p = logits * (1.0 / temperature)
    for _ in range(iterations):
        log_p = log_p - log_p.logsumexp(axis=row_axis, keepdims=True).tile(reps_row)
        log_p = log_p - log_p.logsumexp(axis=col_axis, keepdims=True).tile(reps_col)
    return log_p.exp()


def is_doubly_stochastic(matrix, tol=1e-6):
    """True when entries are nonnegative and all row/column sums are 1 +- tol."""
    m = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix)
    if m.shape[-1] != m.shape[-2]:
        return False
    return bool(
        np.all(m >= 0.0)
        and np.max(np.abs(m.sum(axis=-1) - 1.0)) <= tol
        and np.max(np.abs(m.sum(axis=-2) - 1.0)) <= tol
    )


class PermutationNetwork:
    """Per-input soft permutations: sinkhorn(relu(X @ W), tau, iters).

    The weight has shape (d, n), so one network is bound to one set size.
    The learned soft matrix stands in for the argmax matching; downstream
    code applies its transpose as the approximate inverse.
    """

    def __init__(self, d, n, temperature=0.1, iterations=100, seed=0):
        if n < 1:
            raise ShapeMismatch("PermutationNetwork", (d, n))
        self.d = d
        self.n = n
        self.temperature = temperature
        self.iterations = iterations
        self.weight = xavier_init((d, n), seed)

    def forward(self, x):
        """Soft permutation for one set (n,d) or a batch (B,n,d)."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim == 2:
            if x.shape != (self.n, self.d):
                raise ShapeMismatch("pn_forward", x.shape, (self.n, self.d))
            logits = (x @ self.weight).relu()
        elif x.ndim == 3:
            if x.shape[1:] != (self.n, self.d):
                raise ShapeMismatch("pn_forward", x.shape, (None, self.n, self.d))
            batch = x.shape[0]
            w = self.weight.reshape((1, self.d, self.n)).tile((batch, 1, 1))
            logits = (x @ w).relu()
        else:
            raise ShapeMismatch("pn_forward", x.shape)
        return sinkhorn(logits, self.temperature, self.iterations)

    def parameters(self):
        return {"weight": self.weight}


def apply_soft(p, x):
    """Permute a set by a soft matrix: returns P^T X.

    Source rows are first reordered into lexicographic value order (an exact
    identity for the product), so averaging weights that are themselves
    permutation-symmetric, e.g. the uniform matrix, yields bit-identical
    outputs however the input rows were ordered.
    """
    if not isinstance(p, Tensor):
        p = Tensor(p)
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if p.ndim != x.ndim or p.shape[-1] != p.shape[-2] or p.shape[-2] != x.shape[-2]:
        raise ShapeMismatch("apply_soft", p.shape, x.shape)
    if x.ndim == 2:
        order = _lex_row_order(x.data)
    elif x.ndim == 3:
        order = np.stack([_lex_row_order(inst) for inst in x.data])
    else:
        raise ShapeMismatch("apply_soft", p.shape, x.shape)
    return p.permute_rows(order).transpose() @ x.permute_rows(order)


def _lex_row_order(rows):
    return np.lexsort(rows.T[::-1])


def hard_match(score):
    """Exact maximum-weight matching of an n-by-n nonnegative score matrix.

    Returns the PermMatrix pi maximizing sum_i score[pi[i], i] (the matching
    read column-by-column).  Ties resolve toward the lexicographically
    smallest pi via optimal-completion checks.
    """
    score = score.data if isinstance(score, Tensor) else np.asarray(score, float)
    if score.ndim != 2 or score.shape[0] != score.shape[1]:
        raise ShapeMismatch("hard_match", score.shape)
    if not np.isfinite(score).all():
        raise DomainError("hard_match: scores must be finite")
    n = score.shape[0]
    if n == 0:
        raise ShapeMismatch("hard_match", score.shape)
    # rows of A are output slots, columns are source elements
    a = score.T.copy()
    pi = _hungarian_max(a)
    best = _match_weight(a, pi)

    # canonicalize: for each slot try smaller sources that keep the optimum
    for i in range(n):
        for j in range(int(pi[i])):
            if j in pi[:i]:
                continue
            candidate = _complete_assignment(a, pi[:i], i, j)
            if candidate is None:
                continue
            weight = _match_weight(a, candidate)
            if weight >= best:
                best = weight
                pi = candidate
                break
    return PermMatrix(pi)


def _match_weight(a, pi):
    return float(sum(a[i, pi[i]] for i in range(len(pi))))


def _complete_assignment(a, prefix, slot, source):
    """Best assignment with slots < ``slot`` fixed to ``prefix`` and
    ``slot`` fixed to ``source``; None when no completion exists."""
    n = a.shape[0]
    used = set(int(v) for v in prefix) | {source}
    free_slots = list(range(slot + 1, n))
    free_sources = [j for j in range(n) if j not in used]
    pi = np.empty(n, dtype=np.int64)
    pi[:slot] = prefix
    pi[slot] = source
    if free_slots:
        sub = a[np.ix_(free_slots, free_sources)]
        sub_pi = _hungarian_max(sub)
        for k, s in enumerate(free_slots):
            pi[s] = free_sources[sub_pi[k]]
    return pi


def _hungarian_max(a):
    """O(n^3) assignment maximizing sum_i a[i, sigma(i)] via shortest
    augmenting paths on the negated matrix with dual potentials."""
    a = np.asarray(a, dtype=np.float64)
    n, m = a.shape
    if n > m:
        raise ShapeMismatch("hungarian", a.shape)
    cost = -a
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.full(m + 1, n, dtype=np.int64)  # column -> row, n = free

    for i in range(n):
        match[m] = i
        j0 = m
        minv = np.full(m + 1, inf)
        way = np.full(m + 1, m, dtype=np.int64)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = m
            for j in range(m):
                if used[j]:
                    continue
                cur = cost[i0, j] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == n:
                break
        while j0 != m:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    sigma = np.empty(n, dtype=np.int64)
    for j in range(m):
        if match[j] != n:
            sigma[match[j]] = j
    return sigma


def greedy_round(p):
    """Round a doubly-stochastic matrix to a hard permutation.

    Entries are visited in descending order (row-major first among ties);
    each visit fixes an unused (row, column) pair.  O(n^2 log n).
    """
    m = p.data if isinstance(p, Tensor) else np.asarray(p, float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeMismatch("greedy_round", m.shape)
    n = m.shape[0]
    order = np.argsort(-m, axis=None, kind="stable")
    pi = np.full(n, -1, dtype=np.int64)
    row_used = np.zeros(n, dtype=bool)
    col_used = np.zeros(n, dtype=bool)
    placed = 0
    for flat in order:
        r, c = divmod(int(flat), n)
        if row_used[r] or col_used[c]:
            continue
        pi[c] = r  # source r feeds output slot c
        row_used[r] = True
        col_used[c] = True
        placed += 1
        if placed == n:
            break
    return PermMatrix(pi)
