import numpy as np

from tdsgl.data import InteractionDataset


def random_dataset(rng, n_users, n_items, density=0.4):
    """Random interactions where every user has at least one item."""
    pairs = set()
    for u in range(n_users):
        items = np.flatnonzero(rng.random(n_items) < density)
        if len(items) == 0:
            items = [int(rng.integers(n_items))]
        pairs.update((u, int(i)) for i in items)
    return InteractionDataset(n_users, n_items, train=sorted(pairs))


def random_problem(rng, n_users, n_items, hyper, batch=None, density=0.4):
    """A small dataset, initial state, one batch and two views for loss checks."""
    from tdsgl.augment import make_view
    from tdsgl.encoder import init_state
    from tdsgl.trainer import build_training_graph, sample_epoch_batches

    ds = random_dataset(rng, n_users, n_items, density)
    while np.bincount(ds.train[:, 0], minlength=n_users).max() >= n_items:
        ds = random_dataset(rng, n_users, n_items, density)
    graph = build_training_graph(ds, hyper)
    state = init_state(n_users, n_items, hyper.dim, rng, 0.5, hyper.fe_kind)
    if state.w is not None:
        state.w = state.w + 0.3 * rng.normal(size=state.w.shape)
    triples = sample_epoch_batches(ds, batch or len(ds.train), rng)[0]
    views = tuple(
        make_view(hyper.aug_kind, graph.r, hyper.rho, hyper.layers, int(rng.integers(2**31)), hyper.self_loop).propagation
        for _ in range(2)
    )
    return ds, graph, state, triples, views


def dense_views(views):
    return tuple([m.toarray() for m in v] if isinstance(v, list) else v.toarray() for v in views)
