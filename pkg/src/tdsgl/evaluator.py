"""Full-ranking top-K evaluation."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(eq=False)
class MetricsReport:
    recall: float
    ndcg: float
    k: int
    n_users: int
    per_user_recall: np.ndarray | None = None
    per_user_ndcg: np.ndarray | None = None
    users: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            f"recall@{self.k}": self.recall,
            f"ndcg@{self.k}": self.ndcg,
            "k": self.k,
            "n_users": self.n_users,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def rank_all(
    final: np.ndarray, u: int, num_users: int, exclude=None
) -> np.ndarray:
    """Item indices by descending score, ties by ascending index, ``exclude`` removed."""
    scores = final[num_users:] @ final[u]
    order = np.argsort(-scores, kind="stable")
    if exclude is not None and len(exclude):
        order = order[~np.isin(order, np.fromiter(exclude, dtype=np.int64))]
    return order


def recall_at_k(ranked, test_set, k: int) -> float | None:
    """``|top-k & test| / |test|``; ``None`` for an empty test set."""
    if k < 1:
        raise ValueError("k must be >= 1")
    test_set = set(test_set)
    if not test_set:
        return None
    hits = sum(1 for i in list(ranked)[:k] if i in test_set)
    return hits / len(test_set)


def _idcg(n: int) -> float:
    return sum(1.0 / math.log2(p + 1) for p in range(1, n + 1))


def ndcg_at_k(ranked, test_set, k: int) -> float | None:
    """Binary-relevance NDCG with ``1 / log2(p + 1)`` discount; ``None`` for an empty test set."""
    if k < 1:
        raise ValueError("k must be >= 1")
    test_set = set(test_set)
    if not test_set:
        return None
    dcg = sum(1.0 / math.log2(p + 1) for p, i in enumerate(list(ranked)[:k], start=1) if i in test_set)
    return dcg / _idcg(min(k, len(test_set)))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k columns, descending score with ties by ascending column."""
    n, m = scores.shape
    k = min(k, m)
    if k == m:
        return np.argsort(-scores, axis=1, kind="stable")
    part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(scores, part, axis=1).min(axis=1, keepdims=True)
    above = scores > kth
    equal = scores == kth
    need = k - above.sum(axis=1, keepdims=True)
    chosen = above | (equal & (np.cumsum(equal, axis=1) <= need))
    cols = np.nonzero(chosen)[1].reshape(n, k)
    order = np.argsort(-np.take_along_axis(scores, cols, axis=1), axis=1, kind="stable")
    return np.take_along_axis(cols, order, axis=1)


def _by_user(pairs: np.ndarray, num_users: int, num_items: int) -> sp.csr_matrix:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    m = sp.csr_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(num_users, num_items))
    m.sum_duplicates()
    m.data[:] = 1.0
    return m


def evaluate(
    final: np.ndarray,
    num_users: int,
    test_pairs: np.ndarray,
    exclude_pairs: np.ndarray | None = None,
    k: int = 20,
    *,
    workers: int = 1,
    chunk: int = 512,
    keep_per_user: bool = False,
) -> MetricsReport:
    """Recall@k and NDCG@k averaged over users with a non-empty test set."""
    if k < 1:
        raise ValueError("k must be >= 1")
    num_items = final.shape[0] - num_users
    test = _by_user(test_pairs, num_users, num_items)
    users = np.flatnonzero(np.diff(test.indptr) > 0)
    excl = _by_user(exclude_pairs if exclude_pairs is not None else np.zeros((0, 2)), num_users, num_items)
    user_emb, item_emb = final[:num_users], final[num_users:]
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    idcg_table = np.concatenate([[0.0], np.cumsum(discounts)])

    def run(batch: np.ndarray):
        scores = user_emb[batch] @ item_emb.T
        ex = excl[batch]
        scores[np.repeat(np.arange(len(batch)), np.diff(ex.indptr)), ex.indices] = -np.inf
        top = top_k(scores, k)
        hits = np.take_along_axis(test[batch].toarray() > 0, top, axis=1)
        n_test = np.diff(test.indptr)[batch]
        recall = hits.sum(axis=1) / n_test
        dcg = (hits * discounts[: top.shape[1]]).sum(axis=1)
        ndcg = dcg / idcg_table[np.minimum(n_test, k)]
        return recall, ndcg

    batches = [users[s : s + chunk] for s in range(0, len(users), chunk)]
    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, batches))
    else:
        results = [run(b) for b in batches]
    if not results:
        return MetricsReport(float("nan"), float("nan"), k, 0)
    recall = np.concatenate([r for r, _ in results])
    ndcg = np.concatenate([n for _, n in results])
    report = MetricsReport(float(recall.mean()), float(ndcg.mean()), k, len(users))
    if keep_per_user:
        report.per_user_recall, report.per_user_ndcg, report.users = recall, ndcg, users
    return report
