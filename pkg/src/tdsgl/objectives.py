"""Loss terms and their analytic gradients with respect to the initial embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .encoder import AuxFeatures, EmbeddingState, FeatureExtractor, propagate, propagate_backward
from .graph import CoOccurrenceMasks, ComplementMask


@dataclass(frozen=True, eq=False)
class BatchTriples:
    """(user, observed item, unobserved item) index triples."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


@dataclass(frozen=True)
class LossBreakdown:
    rec: float
    ssl_user: float
    ssl_item: float
    reg: float
    total: float


def bpr_loss(triples: BatchTriples, final: np.ndarray, num_users: int) -> tuple[float, np.ndarray]:
    """Summed ``-log sigmoid(s(u, i) - s(u, j))`` and its gradient w.r.t. ``final``."""
    if len(triples) == 0:
        raise ValueError("empty batch")
    u = triples.users
    i = num_users + triples.pos
    j = num_users + triples.neg
    xu, xi, xj = final[u], final[i], final[j]
    diff = np.einsum("bf,bf->b", xu, xi - xj)
    loss = float(np.logaddexp(0.0, -diff).sum())
    coef = -expit(-diff)[:, None]
    grad = np.zeros_like(final)
    np.add.at(grad, u, coef * (xi - xj))
    np.add.at(grad, i, coef * xu)
    np.add.at(grad, j, -coef * xu)
    return loss, grad


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return x * inv[:, None], inv


def _normalize_backward(g: np.ndarray, x_hat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    radial = np.einsum("bf,bf->b", g, x_hat)
    return (g - radial[:, None] * x_hat) * inv[:, None]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity, defined as 0 when either vector is zero."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


@dataclass(eq=False)
class InfoNCEResult:
    loss: float
    grad_view1: np.ndarray
    grad_view2: np.ndarray
    grad_aux: np.ndarray | None


def debiased_infonce(
    view1: np.ndarray,
    view2: np.ndarray,
    nodes: np.ndarray,
    mask: ComplementMask | np.ndarray | None = None,
    aux: np.ndarray | None = None,
    tau: float = 0.2,
    candidates: np.ndarray | None = None,
    include_positive: bool = True,
) -> InfoNCEResult:
    """Masked InfoNCE between two views for anchor ``nodes``.

    For anchor u the logit set is ``s(x'_u, x''_v) / tau`` over candidates
    v with ``mask(u, v) = 1``; ``include_positive`` forces v = u into it.
    ``aux`` adds ``s(x'_u, aux_u) / tau`` to the numerator only. A dense
    ``mask`` is indexed by absolute node ids; ``None`` means all ones.
    Anchors left with an empty denominator contribute nothing.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau!r}")
    nodes = np.asarray(nodes, dtype=np.int64)
    candidates = nodes if candidates is None else np.asarray(candidates, dtype=np.int64)
    pos = np.searchsorted(candidates, nodes)
    if np.any(pos >= len(candidates)) or np.any(candidates[np.minimum(pos, len(candidates) - 1)] != nodes):
        raise ValueError("every anchor must be among the (sorted) candidates")
    rows = np.arange(len(nodes))

    a_hat, a_inv = _normalize_rows(view1[nodes])
    b_hat, b_inv = _normalize_rows(view2[candidates])
    logits = (a_hat @ b_hat.T) / tau

    if mask is None:
        allowed = np.ones(logits.shape, dtype=bool)
    elif isinstance(mask, ComplementMask):
        allowed = mask.block(nodes, candidates)
    else:
        allowed = np.asarray(mask)[np.ix_(nodes, candidates)].astype(bool)
    if include_positive:
        allowed[rows, pos] = True

    masked = np.where(allowed, logits, -np.inf)
    lse = logsumexp(masked, axis=1)
    valid = np.isfinite(lse)
    per_anchor = np.where(valid, lse, 0.0) - np.where(valid, logits[rows, pos], 0.0)

    if aux is not None:
        c_hat, c_inv = _normalize_rows(aux[nodes])
        aux_logit = np.einsum("bf,bf->b", a_hat, c_hat) / tau
        per_anchor = per_anchor - np.where(valid, aux_logit, 0.0)

    soft = np.zeros_like(logits)
    soft[valid] = np.exp(masked[valid] - lse[valid, None])
    soft[rows[valid], pos[valid]] -= 1.0

    g_a_hat = (soft @ b_hat) / tau
    g_b_hat = (soft.T @ a_hat) / tau
    grad_aux = None
    if aux is not None:
        w = valid[:, None] / tau
        g_a_hat -= c_hat * w
        g_c = _normalize_backward(-a_hat * w, c_hat, c_inv)
        grad_aux = np.zeros_like(aux)
        grad_aux[nodes] = g_c

    grad_view1 = np.zeros_like(view1)
    grad_view1[nodes] = _normalize_backward(g_a_hat, a_hat, a_inv)
    grad_view2 = np.zeros_like(view2)
    grad_view2[candidates] = _normalize_backward(g_b_hat, b_hat, b_inv)
    return InfoNCEResult(float(per_anchor.sum()), grad_view1, grad_view2, grad_aux)


def regularization(state: EmbeddingState, triples: BatchTriples) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Squared norm of the batch's initial-embedding rows (and ``w``) over batch size."""
    nu, b = state.num_users, len(triples)
    rows = np.concatenate([triples.users, nu + triples.pos, nu + triples.neg])
    x = state.x0[rows]
    reg = float(np.einsum("bf,bf->", x, x)) / b
    grad = np.zeros_like(state.x0)
    np.add.at(grad, rows, (2.0 / b) * x)
    grad_w = None
    if state.w is not None:
        reg += float(np.sum(state.w * state.w)) / b
        grad_w = (2.0 / b) * state.w
    return reg, grad, grad_w


def total_loss(
    state: EmbeddingState,
    triples: BatchTriples,
    norm_adj,
    hyper,
    views=None,
    masks: CoOccurrenceMasks | None = None,
    extractor: FeatureExtractor | None = None,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray | None]:
    """Multi-task objective ``rec + lambda * (ssl_user + ssl_item) + mu * reg``.

    ``views`` is a pair of propagation inputs (see
    :attr:`tdsgl.augment.AugmentedView.propagation`); ``None`` or
    ``hyper.ssl_enabled = False`` drops the contrastive task entirely.
    Returns the breakdown and gradients w.r.t. ``x0`` and ``w``.
    """
    nu, layers = state.num_users, hyper.layers
    x0 = state.x0

    main = propagate(norm_adj, x0, layers)
    rec, g_final = bpr_loss(triples, main.final, nu)
    grad = propagate_backward(norm_adj, g_final, layers, symmetric=True)
    reg, g_reg, g_w_reg = regularization(state, triples)

    ssl_user = ssl_item = 0.0
    g_w = None
    if views is not None and hyper.ssl_enabled:
        g_ssl, ssl_user, ssl_item, g_w = _ssl_gradient(state, triples, hyper, views, masks, extractor)
        grad = grad + hyper.ssl_lambda * g_ssl
        if g_w is not None:
            g_w = hyper.ssl_lambda * g_w
    grad = grad + hyper.mu * g_reg
    if g_w_reg is not None:
        g_w = hyper.mu * g_w_reg if g_w is None else g_w + hyper.mu * g_w_reg

    total = rec + hyper.ssl_lambda * (ssl_user + ssl_item) + hyper.mu * reg
    return LossBreakdown(rec, ssl_user, ssl_item, reg, total), grad, g_w


def _ssl_gradient(state, triples, hyper, views, masks, extractor):
    nu, layers, x0 = state.num_users, hyper.layers, state.x0
    view1, view2 = views
    f1 = propagate(view1, x0, layers, "view1").final
    f2 = propagate(view2, x0, layers, "view2").final

    users = np.unique(triples.users)
    items = np.unique(triples.pos)
    aux: AuxFeatures | None = None
    if hyper.use_aux:
        if extractor is None:
            raise ValueError("auxiliary positives need a feature extractor")
        aux = extractor(x0, state.w, users, items)
    use_mask = hyper.use_mask and masks is not None
    sides = (
        (users, f1[:nu], f2[:nu], masks.m_user if use_mask else None, None if aux is None else aux.user),
        (items, f1[nu:], f2[nu:], masks.m_item if use_mask else None, None if aux is None else aux.item),
    )
    results = []
    for nodes, a, b, m, c in sides:
        cands = np.arange(len(b)) if hyper.full_contrast else None
        results.append(
            debiased_infonce(a, b, nodes, m, c, hyper.tau, cands, hyper.include_positive)
        )
    ru, ri = results
    g_f1 = np.concatenate([ru.grad_view1, ri.grad_view1])
    g_f2 = np.concatenate([ru.grad_view2, ri.grad_view2])
    grad = propagate_backward(view1, g_f1, layers, True) + propagate_backward(view2, g_f2, layers, True)
    g_w = None
    if aux is not None:
        g_aux_x0, g_w = extractor.backward(aux, ru.grad_aux, ri.grad_aux, state.w)
        grad = grad + g_aux_x0
    return grad, ru.loss, ri.loss, g_w
