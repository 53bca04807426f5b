"""Independent reference implementations used only by the tests."""

from __future__ import annotations

from fractions import Fraction
from itertools import combinations


def optimal_kmeans_1d(values, k):
    """Exact 1-D k-means WCSS by dynamic programming over sorted values."""
    x = sorted(float(v) for v in values)
    n = len(x)
    pre = [0.0] * (n + 1)
    pre2 = [0.0] * (n + 1)
    for i, v in enumerate(x):
        pre[i + 1] = pre[i] + v
        pre2[i + 1] = pre2[i] + v * v

    def cost(i, j):  # x[i:j]
        m = j - i
        s = pre[j] - pre[i]
        return max(0.0, (pre2[j] - pre2[i]) - s * s / m)

    inf = float("inf")
    dp = [[inf] * (n + 1) for _ in range(k + 1)]
    dp[0][0] = 0.0
    for c in range(1, k + 1):
        for j in range(1, n + 1):
            best = inf
            for i in range(c - 1, j):
                if dp[c - 1][i] < inf:
                    v = dp[c - 1][i] + cost(i, j)
                    if v < best:
                        best = v
            dp[c][j] = best
    return dp[k][n]


def brute_force_itemsets(transactions, min_support):
    """Every non-empty subset of the item universe with support >= min_support."""
    txs = [frozenset(t) for t in transactions]
    universe = sorted(set().union(*txs))
    n = len(txs)
    out = {}
    for size in range(1, len(universe) + 1):
        for combo in combinations(universe, size):
            s = frozenset(combo)
            count = sum(1 for t in txs if s <= t)
            if count and Fraction(count, n) >= Fraction(min_support).limit_denominator(10**9):
                out[s] = Fraction(count, n)
    return out


def brute_force_rules(transactions, min_support, min_confidence):
    txs = [frozenset(t) for t in transactions]
    n = len(txs)
    frequent = brute_force_itemsets(transactions, min_support)
    rules = {}
    for s, sup in frequent.items():
        if len(s) < 2:
            continue
        items = sorted(s)
        for size in range(1, len(items)):
            for lhs in combinations(items, size):
                lhs = frozenset(lhs)
                lhs_count = sum(1 for t in txs if lhs <= t)
                conf = Fraction(sup * n, lhs_count)
                if conf >= Fraction(min_confidence).limit_denominator(10**9):
                    rules[(lhs, s - lhs)] = (sup, conf)
    return rules
