"""Embeddings, linear graph propagation and false-negative feature extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import symmetric_normalize

FE_KINDS = ("linear", "nl", "nl+w")

CKPT_MAGIC = b"TDSGLCKP"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIqqqqI")


@dataclass(eq=False)
class EmbeddingState:
    """Trainable parameters and Adam moments.

    ``x0`` stacks users (rows ``0..num_users``) then items. ``w`` is the
    optional feature transform of the ``nl+w`` extractor.
    """

    num_users: int
    x0: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    w: np.ndarray | None = None
    w_m: np.ndarray | None = None
    w_v: np.ndarray | None = None

    @property
    def num_items(self) -> int:
        return self.x0.shape[0] - self.num_users

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    def copy(self) -> "EmbeddingState":
        def c(a):
            return None if a is None else a.copy()

        return EmbeddingState(
            self.num_users, self.x0.copy(), self.m.copy(), self.v.copy(), self.step,
            c(self.w), c(self.w_m), c(self.w_v),
        )

    def equals(self, other: "EmbeddingState") -> bool:
        arrays = ("x0", "m", "v", "w", "w_m", "w_v")
        if self.num_users != other.num_users or self.step != other.step:
            return False
        for name in arrays:
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


def init_state(
    num_users: int,
    num_items: int,
    dim: int = 64,
    rng=None,
    std: float = 0.1,
    fe_kind: str = "linear",
) -> EmbeddingState:
    """Gaussian(0, std) embeddings; ``nl+w`` also gets an identity transform."""
    if fe_kind not in FE_KINDS:
        raise ValueError(f"unknown feature-extraction kind {fe_kind!r}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n = num_users + num_items
    x0 = rng.normal(0.0, std, size=(n, dim))
    state = EmbeddingState(num_users, x0, np.zeros_like(x0), np.zeros_like(x0))
    if fe_kind == "nl+w":
        state.w = np.eye(dim)
        state.w_m = np.zeros((dim, dim))
        state.w_v = np.zeros((dim, dim))
    return state


@dataclass(eq=False)
class ForwardOutput:
    per_layer: list[np.ndarray]
    final: np.ndarray
    view: str = "main"


def _layer_matrices(adj, layers: int) -> list:
    if isinstance(adj, (list, tuple)):
        if len(adj) != layers:
            raise ValueError(f"got {len(adj)} per-layer matrices for {layers} layers")
        return list(adj)
    return [adj] * layers


def propagate(adj, x0: np.ndarray, layers: int, view: str = "main") -> ForwardOutput:
    """``X(l+1) = A_l X(l)`` for ``l < layers``; final is the mean of all layers.

    ``adj`` is one normalized adjacency or a list with one per layer.
    """
    if layers < 0:
        raise ValueError("layers must be >= 0")
    mats = _layer_matrices(adj, layers)
    for a in mats:
        if a.shape != (x0.shape[0], x0.shape[0]):
            raise ValueError(f"adjacency {a.shape} does not match embeddings {x0.shape}")
    per_layer = [x0]
    for a in mats:
        per_layer.append(a @ per_layer[-1])
    final = per_layer[0].copy()
    for x in per_layer[1:]:
        final += x
    final /= layers + 1
    return ForwardOutput(per_layer, final, view)


def propagate_backward(adj, grad_final: np.ndarray, layers: int, symmetric: bool = False) -> np.ndarray:
    """Gradient w.r.t. ``x0`` given the gradient w.r.t. the final matrix.

    ``symmetric`` skips the transpose (CSR products are faster than CSC ones).
    """
    mats = _layer_matrices(adj, layers)
    h = grad_final
    for a in reversed(mats):
        h = grad_final + (a if symmetric else a.T) @ h
    return h / (layers + 1)


def predict_score(final: np.ndarray, u: int, i: int, num_users: int) -> float:
    return float(final[u] @ final[num_users + i])


@dataclass(eq=False)
class AuxFeatures:
    """Auxiliary positives, full-size; only ``rows`` are computed when given."""

    user: np.ndarray
    item: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)


# above this fill ratio a normalized false-negative matrix is kept dense
DENSE_FILL = 0.1


def _compact(m: sp.csr_matrix):
    n = m.shape[0] * m.shape[1]
    return m.toarray() if n and m.nnz > DENSE_FILL * n else m


class FeatureExtractor:
    """One-layer normalized aggregation of initial embeddings over false negatives.

    Works on layer-0 embeddings only. ``nl`` applies ``max(0, .)`` after
    aggregation, ``nl+w`` multiplies by a trainable transform first.
    """

    def __init__(self, f_user: sp.spmatrix, f_item: sp.spmatrix, kind: str = "linear"):
        if kind not in FE_KINDS:
            raise ValueError(f"unknown feature-extraction kind {kind!r}")
        self.kind = kind
        self.fn_user = _compact(symmetric_normalize(f_user))
        self.fn_item = _compact(symmetric_normalize(f_item))
        self.num_users = f_user.shape[0]

    def _sides(self, x0):
        nu = self.num_users
        return (("user", self.fn_user, x0[:nu]), ("item", self.fn_item, x0[nu:]))

    def __call__(
        self, x0: np.ndarray, w: np.ndarray | None = None, user_rows=None, item_rows=None
    ) -> AuxFeatures:
        out, cache = [], {}
        for (side, fn, x), rows in zip(self._sides(x0), (user_rows, item_rows)):
            block = fn if rows is None else fn[rows]
            agg = np.asarray(block @ x)
            if self.kind != "linear":
                pre = agg @ w if self.kind == "nl+w" else agg
                agg_in, agg = agg, np.maximum(pre, 0.0)
                cache[side] = (agg_in, pre)
            if rows is not None:
                full = np.zeros_like(x)
                full[rows] = agg
                agg = full
            cache[side + "_rows"] = rows
            out.append(agg)
        return AuxFeatures(out[0], out[1], cache)

    def backward(
        self, aux: AuxFeatures, g_user: np.ndarray, g_item: np.ndarray, w: np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray | None]:
        """Gradients w.r.t. ``x0`` (full N x F) and ``w`` given gradients of the outputs."""
        grads, g_w = [], None
        for side, fn, g in (("user", self.fn_user, g_user), ("item", self.fn_item, g_item)):
            rows = aux._cache.get(side + "_rows")
            if rows is not None:
                g = g[rows]
                fn = fn[rows]
            if self.kind != "linear":
                agg, pre = aux._cache[side]
                g = g * (pre > 0)
                if self.kind == "nl+w":
                    g_w = agg.T @ g if g_w is None else g_w + agg.T @ g
                    g = g @ w.T
            grads.append(np.asarray(fn.T @ g))
        return np.concatenate(grads), g_w


def extract_aux_features(
    f_user: sp.spmatrix, f_item: sp.spmatrix, x0: np.ndarray, kind: str = "linear", w=None
) -> tuple[np.ndarray, np.ndarray]:
    aux = FeatureExtractor(f_user, f_item, kind)(x0, w)
    return aux.user, aux.item


# -- checkpoints -------------------------------------------------------------


def dumps_checkpoint(state: EmbeddingState) -> bytes:
    has_w = state.w is not None
    header = _CKPT_HEADER.pack(
        CKPT_MAGIC, CKPT_VERSION, state.num_users, state.num_items, state.dim, state.step, int(has_w)
    )
    blocks = [state.x0, state.m, state.v]
    if has_w:
        blocks += [state.w, state.w_m, state.w_v]
    return header + b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks)


def loads_checkpoint(buf: bytes) -> EmbeddingState:
    if len(buf) < _CKPT_HEADER.size:
        raise ValueError("truncated checkpoint")
    magic, version, n_u, n_i, dim, step, has_w = _CKPT_HEADER.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    n = n_u + n_i
    shapes = [(n, dim)] * 3 + ([(dim, dim)] * 3 if has_w else [])
    expected = _CKPT_HEADER.size + 8 * sum(a * b for a, b in shapes)
    if len(buf) != expected:
        raise ValueError(f"checkpoint has {len(buf)} bytes, expected {expected}")
    off, arrays = _CKPT_HEADER.size, []
    for shape in shapes:
        count = shape[0] * shape[1]
        arrays.append(np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64))
        off += 8 * count
    state = EmbeddingState(n_u, arrays[0], arrays[1], arrays[2], step)
    if has_w:
        state.w, state.w_m, state.w_v = arrays[3:]
    return state


def save_checkpoint(path: str, state: EmbeddingState) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(state))


def load_checkpoint(path: str) -> EmbeddingState:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
