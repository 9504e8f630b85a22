"""Stochastic graph views for the contrastive task."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import build_normalized_adjacency

KINDS = {"ed": "edge-dropout", "nd": "node-dropout", "rw": "random-walk"}


@dataclass(frozen=True, eq=False)
class AugmentedView:
    """A perturbed, renormalized adjacency.

    ``per_layer`` is set only for random-walk views (one matrix per
    propagation layer); ``adjacency`` is then the first layer's matrix.
    ``kept`` is the surviving interaction submatrix (first layer for
    random walks).
    """

    adjacency: sp.csr_matrix
    kind: str
    seed: int | None
    kept: sp.csr_matrix
    per_layer: tuple[sp.csr_matrix, ...] | None = None

    @property
    def propagation(self):
        """What :func:`tdsgl.encoder.propagate` expects for this view."""
        return list(self.per_layer) if self.per_layer is not None else self.adjacency


def _rng(rng) -> tuple[np.random.Generator, int | None]:
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), None if rng is None else int(rng)


def _check_rho(rho: float) -> None:
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"dropout ratio must satisfy 0 <= rho < 1, got {rho!r}")


def _drop_edges(r: sp.csr_matrix, rho: float, rng: np.random.Generator) -> sp.csr_matrix:
    coo = r.tocoo()
    keep = rng.random(coo.nnz) >= rho
    return sp.csr_matrix(
        (coo.data[keep], (coo.row[keep], coo.col[keep])), shape=r.shape
    )


def edge_dropout(r: sp.csr_matrix, rho: float, rng=None, with_self_loop: bool = True) -> AugmentedView:
    """Keep each interaction independently with probability ``1 - rho``."""
    _check_rho(rho)
    gen, seed = _rng(rng)
    kept = _drop_edges(sp.csr_matrix(r), rho, gen)
    return AugmentedView(build_normalized_adjacency(kept, with_self_loop), "edge-dropout", seed, kept)


def node_dropout(r: sp.csr_matrix, rho: float, rng=None, with_self_loop: bool = True) -> AugmentedView:
    """Drop each user and item node with probability ``rho``, with all its edges.

    Dropped nodes keep their index; only their incident edges vanish.
    """
    _check_rho(rho)
    gen, seed = _rng(rng)
    r = sp.csr_matrix(r)
    user_keep = gen.random(r.shape[0]) >= rho
    item_keep = gen.random(r.shape[1]) >= rho
    kept = drop_nodes(r, ~user_keep, ~item_keep)
    return AugmentedView(build_normalized_adjacency(kept, with_self_loop), "node-dropout", seed, kept)


def drop_nodes(r: sp.csr_matrix, drop_users: np.ndarray, drop_items: np.ndarray) -> sp.csr_matrix:
    coo = sp.csr_matrix(r).tocoo()
    keep = ~(np.asarray(drop_users)[coo.row] | np.asarray(drop_items)[coo.col])
    return sp.csr_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=r.shape)


def random_walk_views(
    r: sp.csr_matrix, rho: float, layers: int, rng=None, with_self_loop: bool = True
) -> AugmentedView:
    """An independent edge-dropout subgraph for each propagation layer."""
    _check_rho(rho)
    if layers < 1:
        raise ValueError("random-walk views need at least one layer")
    gen, seed = _rng(rng)
    r = sp.csr_matrix(r)
    kept = [_drop_edges(r, rho, gen) for _ in range(layers)]
    per_layer = tuple(build_normalized_adjacency(k, with_self_loop) for k in kept)
    return AugmentedView(per_layer[0], "random-walk", seed, kept[0], per_layer)


def make_view(
    kind: str, r: sp.csr_matrix, rho: float, layers: int, rng=None, with_self_loop: bool = True
) -> AugmentedView:
    """Dispatch on the config value of ``aug.kind`` (``ed``, ``nd`` or ``rw``)."""
    if kind == "ed":
        return edge_dropout(r, rho, rng, with_self_loop)
    if kind == "nd":
        return node_dropout(r, rho, rng, with_self_loop)
    if kind == "rw":
        if layers == 0:
            return edge_dropout(r, rho, rng, with_self_loop)
        return random_walk_views(r, rho, layers, rng, with_self_loop)
    raise ValueError(f"unknown augmentation kind {kind!r}; expected one of {sorted(KINDS)}")
