"""Episodic first-order meta-training and the supervised fine-tuning baseline.

Each meta-step draws a batch of episodes (one task each, sampled with
replacement), adapts a fresh parameter clone on every support set for
`inner_steps` optimizer updates at the inner rate, and treats the query
gradient at the adapted parameters as that episode's meta-gradient.
Contributions are averaged over the batch, clipped to a global L2 norm,
and applied with one Adam step at the meta rate. Both loops default to
Adam; the inner loop can be switched to plain gradient descent.

Models are duck-typed: anything with init/predict/loss/loss_and_grads
(see net.TransformerModel) trains here, which lets scalar toy models
stand in when tests need closed-form oracles.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .dataio import DataSizeError, TaskDataset
from .mutenc import Vocabulary, canonical_mutation_text, encode_enhanced, encode_standard
from .net import batch_from_token_sequences, save_checkpoint
from .tensor_engine import ShapeError, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class MamlConfig:
    inner_lr: float = 0.01
    meta_lr: float = 0.001
    support_size: int = 8
    query_size: int = 8
    meta_batch: int = 4
    epochs: int = 50
    inner_steps: int = 5
    clip_max_norm: float | None = 1.0
    inner_optimizer: str = "adam"
    seed: int = 0
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.inner_lr < 0 or self.meta_lr < 0:
            raise ShapeError("learning rates must be non-negative")
        if self.inner_steps < 1:
            raise ShapeError("inner_steps must be >= 1")
        if self.support_size < 1 or self.query_size < 1:
            raise ShapeError("support_size and query_size must be >= 1")
        if self.meta_batch < 1 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ShapeError("meta_batch/steps_per_epoch must be >= 1, epochs >= 0")
        if self.inner_optimizer not in ("sgd", "adam"):
            raise ShapeError(f"inner_optimizer must be sgd or adam, got {self.inner_optimizer!r}")
        if self.clip_max_norm is not None and self.clip_max_norm <= 0:
            raise ShapeError("clip_max_norm must be positive (or None to disable)")

    @property
    def episode_size(self) -> int:
        return self.support_size + self.query_size


@dataclass
class Episode:
    """One task's support/query draw, still as records."""

    task: str
    support: list
    query: list


@dataclass
class EncodedEpisode:
    task: str
    support_batch: object
    support_y: np.ndarray
    query_batch: object
    query_y: np.ndarray


class AdamState:
    """Canonical Adam moments with bias correction; shapes mirror the ParamSet."""

    def __init__(self, params):
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def update(self, params, grads, lr: float) -> None:
        """One in-place Adam step over every parameter."""
        self.step += 1
        t = self.step
        for name, p in params.items():
            g = grads[name].data
            m = self.m[name] = ADAM_BETA1 * self.m[name] + (1.0 - ADAM_BETA1) * g
            v = self.v[name] = ADAM_BETA2 * self.v[name] + (1.0 - ADAM_BETA2) * g * g
            mhat = m / (1.0 - ADAM_BETA1 ** t)
            vhat = v / (1.0 - ADAM_BETA2 ** t)
            p.data -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)

    def snapshot(self) -> tuple[int, dict, dict]:
        return (self.step,
                {k: a.copy() for k, a in self.m.items()},
                {k: a.copy() for k, a in self.v.items()})

    @classmethod
    def restore(cls, params, state) -> "AdamState":
        inst = cls(params)
        inst.step, m, v = state
        inst.m = {k: np.array(a, dtype=np.float64) for k, a in m.items()}
        inst.v = {k: np.array(a, dtype=np.float64) for k, a in v.items()}
        return inst


class RecordEncoder:
    """Turn MutationRecords into ((ids, mask), targets) batches for the net."""

    def __init__(self, max_len: int, mode: str = "enhanced", vocab: Vocabulary | None = None):
        if mode not in ("enhanced", "standard"):
            raise ShapeError(f"encoder mode must be enhanced or standard, got {mode!r}")
        self.max_len = max_len
        self.mode = mode
        self.vocab = vocab or Vocabulary()

    def __call__(self, records):
        if self.mode == "enhanced":
            seqs = [encode_enhanced(r.sequence, r.mutations, self.vocab, self.max_len)
                    for r in records]
        else:
            seqs = [encode_standard(r.sequence, canonical_mutation_text(r.mutations),
                                    self.vocab, self.max_len) for r in records]
        y = np.asarray([r.target for r in records], dtype=np.float64)
        return batch_from_token_sequences(seqs), y


def sample_episode(task: TaskDataset, cfg: MamlConfig, rng) -> Episode:
    """Draw support+query records uniformly without replacement from one task."""
    n = cfg.episode_size
    if len(task.train) < n:
        raise DataSizeError(
            f"task {task.task!r} has {len(task.train)} training records, needs {n} per episode")
    idx = rng.choice(len(task.train), size=n, replace=False)
    picked = [task.train[int(i)] for i in idx]
    return Episode(task=task.task, support=picked[:cfg.support_size],
                   query=picked[cfg.support_size:])


def encode_episode(ep: Episode, encoder) -> EncodedEpisode:
    sb, sy = encoder(ep.support)
    qb, qy = encoder(ep.query)
    return EncodedEpisode(task=ep.task, support_batch=sb, support_y=sy,
                          query_batch=qb, query_y=qy)


def inner_adapt(model, params, support_batch, support_y, cfg: MamlConfig, rng):
    """Adapt a fresh clone for inner_steps updates; returns (θ′, per-step losses)."""
    adapted = params.clone()
    opt = AdamState(adapted) if cfg.inner_optimizer == "adam" else None
    losses = []
    for _ in range(cfg.inner_steps):
        loss, g = model.loss_and_grads(adapted, support_batch, support_y, rng=rng, train=True)
        losses.append(loss)
        if opt is not None:
            opt.update(adapted, g, cfg.inner_lr)
        else:
            for name, p in adapted.items():
                p.data -= cfg.inner_lr * g[name].data
    return adapted, losses


def grad_norm(grads) -> float:
    """Global L2 norm across every tensor in a gradient map."""
    total = 0.0
    for _, g in grads.items():
        total += float((g.data ** 2).sum())
    return float(np.sqrt(total))


def clip_grad(grads, max_norm: float):
    """Scale all tensors by max_norm/norm when the global norm exceeds max_norm.

    Returns (clipped gradient map, pre-clip norm). max_norm None disables
    clipping but still reports the norm.
    """
    norm = grad_norm(grads)
    if max_norm is None or norm <= max_norm:
        return {name: g for name, g in grads.items()}, norm
    scale = max_norm / norm
    return {name: Tensor(g.data * scale) for name, g in grads.items()}, norm


def meta_step(model, params, episodes: list[EncodedEpisode], cfg: MamlConfig,
              adam: AdamState, rng):
    """One outer update from a meta-batch of episodes; returns (θ_new, metrics)."""
    if len(episodes) != cfg.meta_batch:
        raise ShapeError(f"meta_step needs {cfg.meta_batch} episodes, got {len(episodes)}")
    accum = {name: np.zeros_like(p.data) for name, p in params.items()}
    support_losses, pre, post = [], [], []
    for ep in episodes:
        pre.append(model.loss(params, ep.query_batch, ep.query_y))
        adapted, slosses = inner_adapt(model, params, ep.support_batch, ep.support_y, cfg, rng)
        support_losses.extend(slosses)
        _, gq = model.loss_and_grads(adapted, ep.query_batch, ep.query_y, rng=rng, train=True)
        post.append(model.loss(adapted, ep.query_batch, ep.query_y))
        for name in accum:
            accum[name] += gq[name].data
    mean_grads = {name: Tensor(a / cfg.meta_batch) for name, a in accum.items()}
    clipped, pre_norm = clip_grad(mean_grads, cfg.clip_max_norm)
    if cfg.clip_max_norm is not None:
        assert grad_norm(clipped) <= cfg.clip_max_norm + 1e-12
    new_params = params.clone()
    adam.update(new_params, clipped, cfg.meta_lr)
    metrics = {
        "mean_support_loss": float(np.mean(support_losses)),
        "query_loss_pre": float(np.mean(pre)),
        "query_loss_post": float(np.mean(post)),
        "grad_norm_preclip": pre_norm,
    }
    return new_params, metrics


def train_maml(model, tasks: list[TaskDataset], cfg: MamlConfig, encoder,
               log_path=None, checkpoint_path=None, checkpoint_meta: dict | None = None,
               clock=time.perf_counter):
    """Meta-train from random init; returns (params, adam, log rows, tasks seen).

    Writes one JSON line per epoch when log_path is given and a
    net-format checkpoint (with optimizer state) when checkpoint_path
    is given. Pass clock=None to zero wall_ms for bit-stable output.
    """
    if not tasks:
        raise DataSizeError("train_maml needs at least one task")
    params = model.init(cfg.seed)
    adam = AdamState(params)
    rng = np.random.default_rng(cfg.seed)
    tasks_seen: set[str] = set()
    log_rows: list[dict] = []

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = clock() if clock else 0.0
            step_metrics = []
            for _ in range(cfg.steps_per_epoch):
                episodes = []
                for _ in range(cfg.meta_batch):
                    pick = int(rng.integers(0, len(tasks)))
                    ep = sample_episode(tasks[pick], cfg, rng)
                    tasks_seen.update(r.task for r in ep.support + ep.query)
                    episodes.append(encode_episode(ep, encoder))
                params, metrics = meta_step(model, params, episodes, cfg, adam, rng)
                step_metrics.append(metrics)
            wall_ms = (clock() - t0) * 1000.0 if clock else 0.0
            row = {
                "epoch": epoch,
                "mean_support_loss": float(np.mean([m["mean_support_loss"] for m in step_metrics])),
                "mean_query_loss": float(np.mean([m["query_loss_post"] for m in step_metrics])),
                "grad_norm_preclip": float(np.mean([m["grad_norm_preclip"] for m in step_metrics])),
                "wall_ms": wall_ms,
            }
            log_rows.append(row)
            if log_fh:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
    finally:
        if log_fh:
            log_fh.close()

    if checkpoint_path:
        save_checkpoint(checkpoint_path, model.config, params,
                        opt_state=adam.snapshot(), meta=checkpoint_meta or {})
    return params, adam, log_rows, tasks_seen


def adapt_and_eval(model, params, target: TaskDataset, cfg: MamlConfig, encoder,
                   trials: int, base_seed: int | None = None) -> list[float]:
    """Per-trial NMSE on the target test split after support-set adaptation.

    Trial i draws its support set and adaptation randomness from seed
    base_seed + i, so one seed reproduces the whole trial list.
    """
    from .evalkit import nmse

    if len(target.train) < cfg.support_size:
        raise DataSizeError(
            f"task {target.task!r} has {len(target.train)} training records, "
            f"needs {cfg.support_size} for adaptation")
    seed0 = cfg.seed if base_seed is None else base_seed
    test_batch, test_y = encoder(target.test)
    values = []
    for i in range(trials):
        rng = np.random.default_rng(seed0 + i)
        idx = rng.choice(len(target.train), size=cfg.support_size, replace=False)
        support = [target.train[int(j)] for j in idx]
        sb, sy = encoder(support)
        adapted, _ = inner_adapt(model, params, sb, sy, cfg, rng)
        preds = model.predict(adapted, test_batch)
        values.append(nmse(preds, test_y))
    return values


@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ShapeError("lr must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ShapeError("batch_size must be >= 1 and epochs >= 0")


def _take(batch, idx):
    if isinstance(batch, tuple):
        return tuple(b[idx] for b in batch)
    return batch[idx]


def train_finetune(model, records, ft: FinetuneConfig, encoder,
                   log_path=None, checkpoint_path=None, checkpoint_meta: dict | None = None,
                   clock=time.perf_counter):
    """Plain mini-batch Adam on MSE over the given records; returns (params, adam, log)."""
    if not records:
        raise DataSizeError("train_finetune needs at least one record")
    batch, y = encoder(records)
    n = len(y)
    params = model.init(ft.seed)
    adam = AdamState(params)
    rng = np.random.default_rng(ft.seed)
    log_rows = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, ft.epochs + 1):
            t0 = clock() if clock else 0.0
            perm = rng.permutation(n)
            losses, norms = [], []
            for start in range(0, n, ft.batch_size):
                sel = perm[start:start + ft.batch_size]
                loss, g = model.loss_and_grads(params, _take(batch, sel), y[sel],
                                               rng=rng, train=True)
                adam.update(params, g, ft.lr)
                losses.append(loss)
                norms.append(grad_norm(g))
            wall_ms = (clock() - t0) * 1000.0 if clock else 0.0
            row = {"epoch": epoch, "mean_support_loss": float(np.mean(losses)),
                   "mean_query_loss": float(np.mean(losses)),
                   "grad_norm_preclip": float(np.mean(norms)), "wall_ms": wall_ms}
            log_rows.append(row)
            if log_fh:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model.config, params,
                        opt_state=adam.snapshot(), meta=checkpoint_meta or {})
    return params, adam, log_rows
