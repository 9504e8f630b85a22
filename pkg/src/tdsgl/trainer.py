"""Training loop: batch sampling, augmented views, Adam updates, model selection."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .augment import KINDS as AUG_KINDS
from .augment import make_view
from .data import InteractionDataset
from .encoder import FE_KINDS, EmbeddingState, FeatureExtractor, init_state, propagate, save_checkpoint
from .evaluator import evaluate
from .graph import CoOccurrenceMasks, build_cooccurrence_masks, build_interaction_matrix, build_normalized_adjacency
from .objectives import BatchTriples, LossBreakdown, total_loss

log = logging.getLogger(__name__)

STEP_FIELDS = ["step", "rec", "ssl_user", "ssl_item", "reg", "total"]


def _metric_fields(k: int) -> list[str]:
    return ["epoch", "rec_loss", "ssl_loss", f"val_recall@{k}", f"val_ndcg@{k}", "seconds"]


@dataclass(frozen=True)
class Hyperparameters:
    beta: int = 8
    beta_item: int | None = None
    tau: float = 0.2
    ssl_lambda: float = 0.1
    mu: float = 1e-4
    layers: int = 3
    dim: int = 64
    rho: float = 0.1
    lr: float = 1e-3
    batch: int = 2048
    epochs: int = 500
    patience: int = 50
    seed: int = 2024
    aug_kind: str = "ed"
    fe_kind: str = "linear"
    use_aux: bool = True
    use_mask: bool = True
    ssl_enabled: bool = True
    full_contrast: bool = False
    include_positive: bool = True
    self_loop: bool = True
    init_std: float = 0.1
    eval_k: int = 20
    eval_every: int = 1

    def __post_init__(self):
        if int(self.beta) != self.beta or self.beta < 1:
            raise ValueError("beta must be an integer >= 1")
        if self.beta_item is not None and (int(self.beta_item) != self.beta_item or self.beta_item < 1):
            raise ValueError("beta_item must be an integer >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.ssl_lambda < 0 or self.mu < 0:
            raise ValueError("lambda and mu must be >= 0")
        if self.layers < 0 or self.dim < 1 or self.batch < 1 or self.epochs < 0:
            raise ValueError("layers >= 0, dim >= 1, batch >= 1, epochs >= 0 required")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must satisfy 0 <= rho < 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.aug_kind not in AUG_KINDS:
            raise ValueError(f"aug_kind must be one of {sorted(AUG_KINDS)}")
        if self.fe_kind not in FE_KINDS:
            raise ValueError(f"fe_kind must be one of {FE_KINDS}")
        if self.patience < 1 or self.eval_k < 1 or self.eval_every < 1:
            raise ValueError("patience, eval_k and eval_every must be >= 1")

    def replace(self, **changes) -> "Hyperparameters":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; ``best_state`` is the last good checkpoint."""

    def __init__(self, message: str, best_state: EmbeddingState | None, checkpoint_path: str | None = None):
        super().__init__(message)
        self.best_state = best_state
        self.checkpoint_path = checkpoint_path


# -- batches -----------------------------------------------------------------


def _interaction_keys(pairs: np.ndarray, num_items: int) -> np.ndarray:
    return np.sort(pairs[:, 0] * np.int64(num_items) + pairs[:, 1])


def sample_negatives(
    users: np.ndarray, train_keys: np.ndarray, num_items: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform unobserved item per user by rejection; ``train_keys`` sorted ``u * N_I + i``."""
    neg = rng.integers(0, num_items, size=len(users))
    todo = np.arange(len(users))
    while len(todo):
        keys = users[todo] * np.int64(num_items) + neg[todo]
        at = np.searchsorted(train_keys, keys)
        hit = (at < len(train_keys)) & (train_keys[np.minimum(at, len(train_keys) - 1)] == keys)
        todo = todo[hit]
        neg[todo] = rng.integers(0, num_items, size=len(todo))
    return neg


def sample_epoch_batches(
    dataset: InteractionDataset, batch: int, rng: np.random.Generator
) -> list[BatchTriples]:
    """One triple per train interaction, shuffled, with fresh negatives."""
    train = dataset.train
    if len(train) == 0:
        raise ValueError("no train interactions to sample from")
    degree = np.bincount(train[:, 0], minlength=dataset.num_users)
    full = np.flatnonzero(degree >= dataset.num_items)
    if len(full):
        raise ValueError(f"user {int(full[0])} interacted with every item; cannot sample a negative")
    order = rng.permutation(len(train))
    users, pos = train[order, 0], train[order, 1]
    neg = sample_negatives(users, _interaction_keys(train, dataset.num_items), dataset.num_items, rng)
    return [
        BatchTriples(users[s : s + batch], pos[s : s + batch], neg[s : s + batch])
        for s in range(0, len(train), batch)
    ]


# -- optimizer ---------------------------------------------------------------

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def _adam_rows(param, m, v, grad, rows, lr, t):
    g = grad[rows]
    m[rows] = ADAM_BETA1 * m[rows] + (1.0 - ADAM_BETA1) * g
    v[rows] = ADAM_BETA2 * v[rows] + (1.0 - ADAM_BETA2) * g * g
    m_hat = m[rows] / (1.0 - ADAM_BETA1**t)
    v_hat = v[rows] / (1.0 - ADAM_BETA2**t)
    param[rows] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def adam_step(
    state: EmbeddingState, grad: np.ndarray, lr: float, grad_w: np.ndarray | None = None
) -> EmbeddingState:
    """Bias-corrected Adam on rows with a non-zero gradient; updates ``state`` in place."""
    if not np.all(np.isfinite(grad)) or (grad_w is not None and not np.all(np.isfinite(grad_w))):
        bad = np.argwhere(~np.isfinite(grad))
        where = f" first at x0{tuple(bad[0])}" if len(bad) else " in w"
        raise FloatingPointError(f"non-finite gradient at step {state.step + 1}:{where}")
    state.step += 1
    t = state.step
    rows = np.flatnonzero(np.any(grad != 0, axis=1))
    if len(rows):
        _adam_rows(state.x0, state.m, state.v, grad, rows, lr, t)
    if grad_w is not None and state.w is not None:
        _adam_rows(state.w, state.w_m, state.w_v, grad_w, np.arange(state.w.shape[0]), lr, t)
    return state


# -- training ----------------------------------------------------------------


@dataclass(eq=False)
class EpochRecord:
    epoch: int
    rec_loss: float
    ssl_loss: float
    val_recall: float
    val_ndcg: float
    seconds: float


@dataclass(eq=False)
class TrainResult:
    best_state: EmbeddingState
    best_epoch: int
    best_val: float
    history: list[EpochRecord]
    steps: list[LossBreakdown] = field(default_factory=list)
    stopped_early: bool = False
    final_state: EmbeddingState | None = None


@dataclass(eq=False)
class TrainingGraph:
    """Matrices fixed for a whole run."""

    r: sp.csr_matrix
    norm_adj: sp.csr_matrix
    masks: CoOccurrenceMasks | None
    extractor: FeatureExtractor | None


def build_training_graph(
    dataset: InteractionDataset, hyper: Hyperparameters, masks: CoOccurrenceMasks | None = None
) -> TrainingGraph:
    r = build_interaction_matrix(dataset)
    norm_adj = build_normalized_adjacency(r, hyper.self_loop)
    if hyper.ssl_enabled and (hyper.use_mask or hyper.use_aux) and masks is None:
        masks = build_cooccurrence_masks(r, hyper.beta, hyper.beta_item)
    extractor = None
    if hyper.ssl_enabled and hyper.use_aux:
        extractor = FeatureExtractor(masks.f_user, masks.f_item, hyper.fe_kind)
    return TrainingGraph(r, norm_adj, masks, extractor)


def final_embeddings(state: EmbeddingState, norm_adj, layers: int) -> np.ndarray:
    return propagate(norm_adj, state.x0, layers).final


def _fmt(x: float) -> str:
    return repr(float(x))


class _Traces:
    def __init__(self, run_dir: str | None, k: int):
        self.run_dir = run_dir
        self.steps_fh = self.metrics_fh = None
        if run_dir is None:
            return
        os.makedirs(run_dir, exist_ok=True)
        self.steps_fh = open(os.path.join(run_dir, "steps.csv"), "w", newline="")
        self.metrics_fh = open(os.path.join(run_dir, "metrics.csv"), "w", newline="")
        self.steps = csv.writer(self.steps_fh)
        self.metrics = csv.writer(self.metrics_fh)
        self.steps.writerow(STEP_FIELDS)
        self.metrics.writerow(_metric_fields(k))

    def step(self, step: int, b: LossBreakdown):
        if self.steps_fh:
            self.steps.writerow([step] + [_fmt(x) for x in (b.rec, b.ssl_user, b.ssl_item, b.reg, b.total)])

    def epoch(self, rec: EpochRecord):
        if self.metrics_fh:
            self.metrics.writerow(
                [rec.epoch] + [_fmt(x) for x in (rec.rec_loss, rec.ssl_loss, rec.val_recall, rec.val_ndcg)]
                + [f"{rec.seconds:.3f}"]
            )
            self.metrics_fh.flush()
            self.steps_fh.flush()

    def close(self):
        for fh in (self.steps_fh, self.metrics_fh):
            if fh:
                fh.close()


def train(
    dataset: InteractionDataset,
    hyper: Hyperparameters,
    *,
    run_dir: str | None = None,
    masks: CoOccurrenceMasks | None = None,
    graph: TrainingGraph | None = None,
    keep_steps: bool = False,
) -> TrainResult:
    """Train with per-epoch views and early stopping on validation Recall@K.

    With ``run_dir`` writes ``steps.csv``, ``metrics.csv`` and the
    best-validation ``checkpoint.bin`` as training proceeds.
    """
    graph = graph or build_training_graph(dataset, hyper, masks)
    init_seq, sample_seq, aug_seq = np.random.SeedSequence(hyper.seed).spawn(3)
    state = init_state(
        dataset.num_users, dataset.num_items, hyper.dim, np.random.default_rng(init_seq),
        hyper.init_std, hyper.fe_kind if hyper.use_aux else "linear",
    )
    sample_rng = np.random.default_rng(sample_seq)
    aug_rng = np.random.default_rng(aug_seq)
    have_val = len(dataset.validation) > 0
    ckpt_path = os.path.join(run_dir, "checkpoint.bin") if run_dir else None

    traces = _Traces(run_dir, hyper.eval_k)
    best_state, best_epoch, best_val = state.copy(), 0, -np.inf
    history: list[EpochRecord] = []
    steps: list[LossBreakdown] = []
    bad_epochs, stopped = 0, False
    try:
        for epoch in range(1, hyper.epochs + 1):
            t0 = time.perf_counter()
            views = None
            if hyper.ssl_enabled:
                s1, s2 = (int(s) for s in aug_rng.integers(0, 2**63 - 1, size=2))
                views = tuple(
                    make_view(hyper.aug_kind, graph.r, hyper.rho, hyper.layers, s, hyper.self_loop).propagation
                    for s in (s1, s2)
                )
            rec_sum = ssl_sum = 0.0
            for triples in sample_epoch_batches(dataset, hyper.batch, sample_rng):
                b, grad, grad_w = total_loss(
                    state, triples, graph.norm_adj, hyper, views, graph.masks, graph.extractor
                )
                if not np.isfinite(b.total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, step {state.step + 1}", best_state, ckpt_path
                    )
                try:
                    adam_step(state, grad, hyper.lr, grad_w)
                except FloatingPointError as exc:
                    raise TrainingDiverged(str(exc), best_state, ckpt_path) from exc
                traces.step(state.step, b)
                if keep_steps:
                    steps.append(b)
                rec_sum += b.rec
                ssl_sum += b.ssl_user + b.ssl_item

            val_recall = val_ndcg = float("nan")
            evaluate_now = epoch % hyper.eval_every == 0 or epoch == hyper.epochs
            if have_val and evaluate_now:
                report = evaluate(
                    final_embeddings(state, graph.norm_adj, hyper.layers), dataset.num_users,
                    dataset.validation, dataset.train, hyper.eval_k,
                )
                val_recall, val_ndcg = report.recall, report.ndcg
            record = EpochRecord(epoch, rec_sum, ssl_sum, val_recall, val_ndcg, time.perf_counter() - t0)
            history.append(record)
            traces.epoch(record)
            log.info(
                "epoch %d rec=%.4f ssl=%.4f val_recall@%d=%.4f (%.1fs)",
                epoch, rec_sum, ssl_sum, hyper.eval_k, val_recall, record.seconds,
            )
            if not evaluate_now:
                continue
            score = val_recall if have_val else float(epoch)
            if score > best_val:
                best_state, best_epoch, best_val, bad_epochs = state.copy(), epoch, score, 0
                if ckpt_path:
                    save_checkpoint(ckpt_path, best_state)
            else:
                bad_epochs += hyper.eval_every
                if bad_epochs >= hyper.patience:
                    stopped = True
                    break
    finally:
        traces.close()
    if ckpt_path and best_epoch == 0:
        save_checkpoint(ckpt_path, best_state)
    return TrainResult(
        best_state, best_epoch, float(best_val) if have_val else float("nan"),
        history, steps, stopped, state,
    )
