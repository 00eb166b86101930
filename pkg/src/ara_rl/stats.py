"""Rank-based comparison of algorithms over replications.

Friedman omnibus test, Conover's pairwise post-hoc test for unreplicated
blocks, Benjamini-Hochberg adjustment and grouping of algorithms that are
not significantly different.

Rows of a :class:`MetricMatrix` are replications (blocks), columns are
algorithms (treatments).
"""

from __future__ import annotations

from dataclasses import dataclass

import networkx as nx
import numpy as np
from scipy import stats as ss


@dataclass(frozen=True)
class MetricMatrix:
    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 2:
            raise ValueError(f"metric matrix must be 2-d, got shape {v.shape}")
        n, k = v.shape
        if n < 2 or k < 2:
            raise ValueError(f"need at least 2 replications and 2 algorithms, got {n} x {k}")
        if np.isnan(v).any():
            raise ValueError("metric matrix has missing cells")
        if len(self.labels) != k:
            raise ValueError(f"{len(self.labels)} labels for {k} columns")

    def ranks(self) -> np.ndarray:
        """Within-row ranks, ties sharing the average rank."""
        return ss.rankdata(self.values, axis=1, method="average")


def friedman(m: MetricMatrix) -> tuple[float, float]:
    """Tie-corrected Friedman chi-square statistic and its p-value (k - 1 df)."""
    n, k = m.values.shape
    r = m.ranks()
    rank_sums = r.sum(axis=0)
    ties = 0.0
    for row in m.values:
        _, counts = np.unique(row, return_counts=True)
        ties += float(np.sum(counts**3 - counts))
    denom = 1.0 - ties / (n * (k**3 - k))
    if denom <= 0:
        return 0.0, 1.0
    stat = (12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums**2)) - 3.0 * n * (k + 1)) / denom
    return stat, float(ss.chi2.sf(stat, k - 1))


def conover_pairwise(m: MetricMatrix) -> np.ndarray:
    """Two-sided Conover p-values for all column pairs (k x k, ones on the diagonal).

    With rank sums ``R_j``, ``A1 = sum r_ij^2`` and ``C1 = n k (k+1)^2 / 4``::

        S2  = (A1 - C1) / (k - 1)
        T2  = sum_j (R_j - n (k+1) / 2)^2 / S2
        var = S2 * 2 n (k-1) / df * (1 - T2 / (n (k-1))),   df = (n-1)(k-1)
        t_ij = |R_i - R_j| / sqrt(var)

    and ``t_ij`` is referred to a t distribution with ``df`` degrees of freedom.
    """
    n, k = m.values.shape
    r = m.ranks()
    rank_sums = r.sum(axis=0)
    a1 = float(np.sum(r**2))
    c1 = n * k * (k + 1) ** 2 / 4.0
    out = np.ones((k, k))
    if a1 - c1 <= 0:  # every row fully tied
        return out
    s2 = (a1 - c1) / (k - 1)
    t2 = float(np.sum((rank_sums - n * (k + 1) / 2.0) ** 2)) / s2
    df = (n - 1) * (k - 1)
    var = s2 * 2.0 * n * (k - 1) / df * (1.0 - t2 / (n * (k - 1)))
    for i in range(k):
        for j in range(i + 1, k):
            diff = abs(rank_sums[i] - rank_sums[j])
            if var <= 0:
                p = 1.0 if diff == 0 else 0.0
            else:
                p = float(2.0 * ss.t.sf(diff / np.sqrt(var), df))
            out[i, j] = out[j, i] = p
    return out


def benjamini_hochberg(p) -> np.ndarray:
    """Step-up FDR adjustment, returned in input order."""
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        return p.copy()
    if np.any((p < 0) | (p > 1)) or np.isnan(p).any():
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adj_sorted, 1.0)
    return out


def adjust_matrix(pmat: np.ndarray) -> np.ndarray:
    """BH-adjust the off-diagonal pairs of a symmetric p-value matrix."""
    k = pmat.shape[0]
    iu = np.triu_indices(k, 1)
    adj = np.ones_like(pmat)
    adj[iu] = benjamini_hochberg(pmat[iu])
    adj.T[iu] = adj[iu]
    return adj


def indistinguishable_groups(adj: np.ndarray, labels, alpha: float = 0.05) -> list[tuple[str, ...]]:
    """Maximal sets of algorithms whose pairwise adjusted p-values all exceed ``alpha``."""
    adj = np.asarray(adj)
    if adj.shape[0] != adj.shape[1] or not np.allclose(adj, adj.T, equal_nan=True):
        raise ValueError("adjusted p-value matrix must be square and symmetric")
    k = adj.shape[0]
    g = nx.Graph()
    g.add_nodes_from(range(k))
    g.add_edges_from((i, j) for i in range(k) for j in range(i + 1, k) if adj[i, j] > alpha)
    cliques = sorted(tuple(sorted(c)) for c in nx.find_cliques(g))
    return [tuple(labels[i] for i in c) for c in cliques]


@dataclass(frozen=True)
class SignificanceResult:
    labels: tuple[str, ...]
    friedman_stat: float
    friedman_p: float
    pairwise_p: np.ndarray
    adjusted_p: np.ndarray
    groups: list
    alpha: float

    def group_of(self, label: str) -> list[int]:
        """1-based indices of the groups containing ``label``."""
        return [i + 1 for i, g in enumerate(self.groups) if label in g]


def significance(m: MetricMatrix, alpha: float = 0.05) -> SignificanceResult:
    stat, p = friedman(m)
    raw = conover_pairwise(m)
    adj = adjust_matrix(raw)
    return SignificanceResult(m.labels, stat, p, raw, adj, indistinguishable_groups(adj, m.labels, alpha), alpha)
