import math

import numpy as np
import pytest
import scipy.sparse as sp

from helpers import dense_views, random_problem
from oracles import dense_total_loss, infonce_loop
from tdsgl.graph import build_masks
from tdsgl.objectives import BatchTriples, bpr_loss, cosine, debiased_infonce, regularization, total_loss
from tdsgl.encoder import init_state
from tdsgl.trainer import Hyperparameters


def _triples(u, i, j):
    return BatchTriples(np.array(u), np.array(i), np.array(j))


def test_bpr_equal_scores_is_log_two():
    final = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    loss, _ = bpr_loss(_triples([0], [0], [1]), final, 1)
    assert loss == pytest.approx(math.log(2))


def test_bpr_unit_margin():
    final = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    loss, _ = bpr_loss(_triples([0], [0], [1]), final, 1)
    assert loss == pytest.approx(0.3133, abs=1e-4)
    assert loss == pytest.approx(-math.log(1 / (1 + math.exp(-1))), rel=1e-12)


def test_bpr_is_a_sum_and_vanishes_with_margin():
    final = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    one, _ = bpr_loss(_triples([0], [0], [1]), final, 1)
    two, _ = bpr_loss(_triples([0, 0], [0, 0], [1, 1]), final, 1)
    assert two == pytest.approx(2 * one, rel=1e-14)
    big, _ = bpr_loss(_triples([0], [0], [1]), final * 40, 1)
    assert 0 <= big < 1e-12
    with pytest.raises(ValueError):
        bpr_loss(_triples([], [], []), final, 1)


def test_infonce_lone_anchor_is_zero():
    v = np.array([[0.3, 0.4]])
    r = debiased_infonce(v, v * 2, np.array([0]), tau=0.5)
    assert r.loss == pytest.approx(0.0, abs=1e-15)


def test_infonce_two_nodes():
    v1 = np.array([[1.0, 0.0], [0.0, 1.0]])
    v2 = v1.copy()
    r = debiased_infonce(v1, v2, np.array([0, 1]), tau=1.0)
    assert r.loss == pytest.approx(2 * -math.log(math.e / (math.e + 1)), rel=1e-12)
    # a mask that removes the other node leaves only the positive
    r = debiased_infonce(v1, v2, np.array([0, 1]), mask=np.eye(2), tau=1.0)
    assert r.loss == pytest.approx(0.0, abs=1e-15)


def test_infonce_aux_numerator():
    v1 = np.array([[1.0, 0.0], [0.0, 1.0]])
    aux = np.array([[1.0, 0.0], [0.0, 0.0]])
    r = debiased_infonce(v1, v1, np.array([0]), aux=aux, tau=1.0, candidates=np.array([0, 1]))
    assert r.loss == pytest.approx(-math.log(math.e / (math.e + 1)) - 1.0, rel=1e-12)
    assert r.loss == pytest.approx(-0.6867, abs=1e-4)
    # a zero auxiliary vector contributes cosine 0
    r0 = debiased_infonce(v1, v1, np.array([1]), aux=aux, tau=1.0, candidates=np.array([0, 1]))
    assert r0.loss == pytest.approx(-math.log(math.e / (math.e + 1)), rel=1e-12)


def test_infonce_rejects_nonpositive_tau():
    v = np.eye(2)
    for tau in (0.0, -1.0):
        with pytest.raises(ValueError):
            debiased_infonce(v, v, np.array([0]), tau=tau)


def test_infonce_matches_loop(rng):
    n = 30
    v1, v2, aux = rng.normal(size=(n, 6)), rng.normal(size=(n, 6)), rng.normal(size=(n, 6))
    aux[3] = 0
    m = (rng.random((n, n)) < 0.6).astype(int)
    anchors = np.unique(rng.integers(0, n, 12))
    for include in (True, False):
        got = debiased_infonce(v1, v2, anchors, m, aux, 0.3, np.arange(n), include).loss
        want = infonce_loop(v1, v2, anchors, range(n), m, aux, 0.3, include)
        assert got == pytest.approx(want, rel=1e-12)


def test_masked_candidates_do_not_matter(rng):
    # dropping candidates with m = 0 from the list leaves the loss bit-identical
    p = sp.csr_matrix(rng.integers(0, 4, size=(20, 20)))
    p = p + p.T
    m, _ = build_masks(p, 3)
    v1, v2 = rng.normal(size=(20, 4)), rng.normal(size=(20, 4))
    anchor = np.array([5])
    full = debiased_infonce(v1, v2, anchor, m, tau=0.2, candidates=np.arange(20))
    keep = np.flatnonzero(m.block(anchor, np.arange(20))[0] | (np.arange(20) == 5))
    cut = debiased_infonce(v1, v2, anchor, m, tau=0.2, candidates=keep)
    assert full.loss == cut.loss


def test_anchor_with_empty_denominator_is_skipped():
    v = np.eye(2)
    r = debiased_infonce(v, v, np.array([0, 1]), mask=np.zeros((2, 2)), tau=1.0, include_positive=False)
    assert r.loss == 0.0 and not r.grad_view1.any()


def test_cosine():
    assert cosine(np.zeros(3), np.ones(3)) == 0.0
    assert cosine(np.array([1.0, 0]), np.array([3.0, 0])) == pytest.approx(1.0)


def test_ssl_is_scale_invariant_but_rec_is_not(rng):
    hyper = Hyperparameters(dim=4, layers=2, tau=0.5, ssl_lambda=1.0, mu=0.0, beta=2, use_aux=False)
    _, graph, state, triples, views = random_problem(rng, 6, 8, hyper)
    base, _, _ = total_loss(state, triples, graph.norm_adj, hyper, views, graph.masks)
    state.x0 *= 2.0
    scaled, _, _ = total_loss(state, triples, graph.norm_adj, hyper, views, graph.masks)
    assert scaled.ssl_user == pytest.approx(base.ssl_user, rel=1e-12)
    assert scaled.ssl_item == pytest.approx(base.ssl_item, rel=1e-12)
    assert scaled.rec != pytest.approx(base.rec, rel=1e-3)


def test_regularization_counts_triple_rows():
    state = init_state(1, 2, 2, 0)
    state.x0[:] = [[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]
    reg, grad, _ = regularization(state, _triples([0, 0], [0, 0], [1, 1]))
    assert reg == pytest.approx((1 + 4 + 2) * 2 / 2)
    np.testing.assert_allclose(grad, 2 * state.x0)


def test_no_ssl_total_equals_rec(rng):
    hyper = Hyperparameters(dim=4, layers=2, ssl_lambda=0.0, mu=0.0, beta=2)
    _, graph, state, triples, views = random_problem(rng, 6, 8, hyper)
    b, grad, _ = total_loss(state, triples, graph.norm_adj, hyper, views, graph.masks, graph.extractor)
    assert b.total == b.rec
    plain, grad_plain, _ = total_loss(state, triples, graph.norm_adj, hyper.replace(ssl_enabled=False))
    assert plain.total == b.rec
    np.testing.assert_array_equal(grad, grad_plain)


def test_saturated_beta_without_aux_equals_plain_contrast(rng):
    hyper = Hyperparameters(dim=4, layers=2, beta=10_000, use_aux=False)
    _, graph, state, triples, views = random_problem(rng, 8, 9, hyper)
    masked, g1, _ = total_loss(state, triples, graph.norm_adj, hyper, views, graph.masks)
    plain, g2, _ = total_loss(state, triples, graph.norm_adj, hyper.replace(use_mask=False), views)
    assert masked == plain
    np.testing.assert_array_equal(g1, g2)


CONFIGS = [
    dict(),
    dict(use_aux=False),
    dict(use_mask=False),
    dict(full_contrast=True),
    dict(include_positive=False, beta=1),
    dict(self_loop=False, layers=1),
    dict(layers=0),
    dict(aug_kind="nd"),
    dict(aug_kind="rw", layers=3),
]


@pytest.mark.parametrize("overrides", CONFIGS)
def test_total_loss_matches_dense_oracle(rng, overrides):
    hyper = Hyperparameters(dim=5, layers=2, beta=2, tau=0.3, ssl_lambda=0.7, mu=0.05, rho=0.3).replace(**overrides)
    _, graph, state, triples, views = random_problem(rng, 7, 9, hyper, batch=12)
    b, _, _ = total_loss(state, triples, graph.norm_adj, hyper, views, graph.masks, graph.extractor)
    masks = graph.masks
    want, parts = dense_total_loss(
        state.x0, 7, (triples.users, triples.pos, triples.neg), graph.r.toarray(), dense_views(views), hyper,
        (masks.m_user.toarray(), masks.m_item.toarray()), (masks.f_user.toarray(), masks.f_item.toarray()),
    )
    assert b.total == pytest.approx(want, rel=1e-10)
    for got, ref in zip((b.rec, b.ssl_user, b.ssl_item, b.reg), parts):
        assert got == pytest.approx(ref, rel=1e-10, abs=1e-12)


def _numeric_check(hyper, rng, coords=40, eps=1e-6):
    _, graph, state, triples, views = random_problem(rng, 6, 8, hyper, batch=10)
    args = (triples, graph.norm_adj, hyper, views, graph.masks, graph.extractor)
    _, grad, grad_w = total_loss(state, *args)
    picks = [(int(r), int(c)) for r, c in zip(rng.integers(0, 14, coords), rng.integers(0, hyper.dim, coords))]
    targets = [("x0", p) for p in picks]
    if state.w is not None:
        targets += [("w", (int(r), int(c))) for r, c in rng.integers(0, hyper.dim, (10, 2))]
    for name, idx in targets:
        arr = getattr(state, name)
        orig = arr[idx]
        arr[idx] = orig + eps
        up = total_loss(state, *args)[0].total
        arr[idx] = orig - eps
        down = total_loss(state, *args)[0].total
        arr[idx] = orig
        numeric = (up - down) / (2 * eps)
        analytic = (grad if name == "x0" else grad_w)[idx]
        assert analytic == pytest.approx(numeric, rel=1e-5, abs=1e-7), (name, idx)


@pytest.mark.parametrize("fe_kind", ["linear", "nl", "nl+w"])
@pytest.mark.parametrize("aug_kind", ["ed", "rw"])
def test_gradient_matches_finite_differences(rng, fe_kind, aug_kind):
    hyper = Hyperparameters(
        dim=4, layers=2, beta=2, tau=0.4, ssl_lambda=0.5, mu=0.1, rho=0.2, fe_kind=fe_kind, aug_kind=aug_kind
    )
    _numeric_check(hyper, rng)


def test_gradient_full_contrast_without_positive(rng):
    hyper = Hyperparameters(dim=3, layers=1, beta=1, tau=0.5, ssl_lambda=1.0, mu=0.0, full_contrast=True,
                            include_positive=False)
    _numeric_check(hyper, rng)
