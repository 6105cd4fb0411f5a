"""Adagrad training with the annealed schedule, one noise draw per
minibatch, and per-epoch metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as mdl
from .corpus import Encoder, build_vocab, max_sentence_len
from .errors import TrainingFault

__all__ = [
    "TrainConfig",
    "AdagradState",
    "EpochMetrics",
    "init_network",
    "adagrad_step",
    "clip_global_norm",
    "train_task",
    "train_joint",
    "evaluate_accuracy",
    "format_metrics_line",
    "METRICS_HEADER",
]


@dataclass
class TrainConfig:
    epochs: int = 100
    minibatches_per_epoch: int = 32
    lr: float = 0.05
    anneal_every: int = 25
    anneal_factor: float = 0.5
    init_sigma: float = 0.1  # std dev of the weight-mean init
    init_scale: float = 0.05  # initial posterior scale softplus(rho_sigma)
    init_nu: float = 100.0
    prior_nu: float = 100.0
    hops: int = 3
    delta: int = 20
    memory_size: int = 50
    grad_clip: float = 40.0
    adagrad_eps: float = 1e-8
    temporal: bool = True
    state_map: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in (
            "epochs",
            "minibatches_per_epoch",
            "lr",
            "anneal_every",
            "init_sigma",
            "init_scale",
            "init_nu",
            "prior_nu",
            "hops",
            "delta",
            "memory_size",
            "grad_clip",
            "adagrad_eps",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.anneal_factor < 1.0:
            raise ValueError("anneal_factor must be in (0, 1)")

    def lr_at(self, epoch):
        """Learning rate for a 1-based epoch under the halving schedule."""
        return self.lr * self.anneal_factor ** ((epoch - 1) // self.anneal_every)


def joint_config(cfg: TrainConfig) -> TrainConfig:
    """The all-tasks-at-once schedule: 60 epochs, anneal every 15."""
    return replace(cfg, epochs=60, anneal_every=15)


@dataclass
class AdagradState:
    acc: dict = field(default_factory=dict)

    def for_param(self, name, arr):
        if name not in self.acc:
            self.acc[name] = np.zeros_like(arr)
        return self.acc[name]


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    val_acc: float
    nu_a: float
    nu_b: float
    nu_c: float


METRICS_HEADER = "epoch\tlr\ttrain_loss\tval_acc\tnu_A\tnu_B\tnu_C"


def format_metrics_line(m: EpochMetrics) -> str:
    return (
        f"{m.epoch}\t{m.lr:.6g}\t{m.train_loss:.6f}\t{m.val_acc:.2f}"
        f"\t{m.nu_a:.4f}\t{m.nu_b:.4f}\t{m.nu_c:.4f}"
    )


def init_network(vocab, cfg: TrainConfig, rng, mode=mdl.VARIATIONAL) -> mdl.MemN2N:
    """Fresh network: means and point weights from N(0, init_sigma^2),
    posterior scale at init_scale, heavy-tail parameter at init_nu (large,
    so the initial posteriors are effectively Gaussian)."""
    shape = (vocab.size, cfg.delta)
    embeddings = {}
    if mode == mdl.VARIATIONAL:
        for key in "ABC":
            embeddings[key] = mdl.VariationalEmbedding(
                mu=rng.normal(0.0, cfg.init_sigma, shape),
                rho_sigma=np.full(shape, mdl.softplus_inv(cfg.init_scale)),
                rho_nu=np.asarray(np.float64(math.log(cfg.init_nu))),
            )
    elif mode == mdl.BASELINE:
        for key in "ABC":
            embeddings[key] = mdl.PointEmbedding(
                weights=rng.normal(0.0, cfg.init_sigma, shape)
            )
    else:
        raise ValueError(f"unknown mode {mode!r}")
    temporal = None
    if cfg.temporal:
        tshape = (cfg.memory_size + 1, cfg.delta)
        temporal = {
            "TA": rng.normal(0.0, cfg.init_sigma, tshape),
            "TC": rng.normal(0.0, cfg.init_sigma, tshape),
        }
    state_map = None
    if cfg.state_map:
        state_map = rng.normal(0.0, cfg.init_sigma, (cfg.delta, cfg.delta))
    return mdl.MemN2N(
        mode=mode,
        embeddings=embeddings,
        output=mdl.OutputLayer(w=rng.normal(0.0, cfg.init_sigma, shape)),
        hops=cfg.hops,
        prior_nu=cfg.prior_nu,
        memory_size=cfg.memory_size,
        temporal=temporal,
        state_map=state_map,
    )


def clip_global_norm(grads, max_norm):
    """Scale the whole gradient set so its global norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def adagrad_step(params, grads, state: AdagradState, lr, cfg: TrainConfig):
    """In-place update: acc += g^2; p -= lr g / (sqrt(acc) + eps).

    Gradients must already be clipped; non-finite entries abort with the
    parameter name.
    """
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingFault(f"non-finite gradient for parameter {name}")
        acc = state.for_param(name, p)
        acc += g * g
        p -= lr * g / (np.sqrt(acc) + cfg.adagrad_eps)


def _partition(indices, n_parts):
    parts = np.array_split(indices, n_parts)
    return [p for p in parts if len(p)]


def evaluate_accuracy(net, encoded, n_samples=1, rng=None):
    """Percent of stories answered correctly."""
    if not encoded:
        return 0.0
    hits = 0
    for enc in encoded:
        answer, _, _ = mdl.predict(net, enc, n_samples=n_samples, rng=rng)
        hits += answer == enc.answer_id
    return 100.0 * hits / len(encoded)


def train_task(
    train_stories,
    val_stories,
    cfg: TrainConfig,
    mode=mdl.VARIATIONAL,
    vocab=None,
    encoder=None,
    extra_stories=(),
    log_fn=None,
):
    """Train one network on one task.

    The vocabulary and sentence width default to being computed over
    train+val plus ``extra_stories`` (pass the test split there so its tokens
    are encodable later). Per epoch: seeded shuffle, near-equal minibatch
    partition, one noise draw per minibatch, objective, backward, clipped
    Adagrad step. Returns (net, encoder, list of EpochMetrics).
    """
    if not train_stories:
        raise ValueError("empty training set")
    if vocab is None:
        vocab = build_vocab(list(train_stories) + list(val_stories) + list(extra_stories))
    if encoder is None:
        width = max_sentence_len(
            list(train_stories) + list(val_stories) + list(extra_stories)
        )
        encoder = Encoder(vocab, width, cfg.memory_size, cfg.delta)
    rng_init = np.random.default_rng([cfg.seed, 0xA11CE])
    net = init_network(vocab, cfg, rng_init, mode=mode)
    enc_train = encoder.encode_all(train_stories)
    enc_val = encoder.encode_all(val_stories)
    state = AdagradState()
    metrics = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        rng_epoch = np.random.default_rng([cfg.seed, epoch])
        order = rng_epoch.permutation(len(enc_train))
        batches = _partition(order, cfg.minibatches_per_epoch)
        kl_scale = 1.0 / len(enc_train)
        epoch_loss = 0.0
        for batch_ids in batches:
            batch = [enc_train[i] for i in batch_ids]
            sample = None
            if mode == mdl.VARIATIONAL:
                sample = mdl.sample_weights(net, rng_epoch)
            tape, loss = mdl.build_objective(net, batch, sample, kl_scale=kl_scale)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingFault(f"non-finite loss at epoch {epoch}")
            epoch_loss += value
            grads = tape.backward(loss)
            clip_global_norm(grads, cfg.grad_clip)
            adagrad_step(net.parameters(), grads, state, lr, cfg)
        rng_val = np.random.default_rng([cfg.seed, epoch, 0x7E57])
        val_acc = evaluate_accuracy(net, enc_val, n_samples=1, rng=rng_val)
        nu_a, nu_b, nu_c = net.nu_values()
        m = EpochMetrics(
            epoch=epoch,
            lr=lr,
            train_loss=epoch_loss / len(batches),
            val_acc=val_acc,
            nu_a=nu_a,
            nu_b=nu_b,
            nu_c=nu_c,
        )
        metrics.append(m)
        if log_fn is not None:
            log_fn(m)
    return net, encoder, metrics


def train_joint(
    tasks_train,
    tasks_val,
    cfg: TrainConfig,
    mode=mdl.VARIATIONAL,
    extra_stories=(),
    log_fn=None,
):
    """One network over the concatenation of all tasks, shared vocabulary.

    ``tasks_train``/``tasks_val`` map task id -> stories. Returns
    (net, encoder, metrics, per_task_val_acc).
    """
    all_train = [s for stories in tasks_train.values() for s in stories]
    all_val = [s for stories in tasks_val.values() for s in stories]
    vocab = build_vocab(all_train + all_val + list(extra_stories))
    width = max_sentence_len(all_train + all_val + list(extra_stories))
    encoder = Encoder(vocab, width, cfg.memory_size, cfg.delta)
    net, _, metrics = train_task(
        all_train,
        all_val,
        cfg,
        mode=mode,
        vocab=vocab,
        encoder=encoder,
        log_fn=log_fn,
    )
    rng = np.random.default_rng([cfg.seed, 0x37A1])
    per_task = {}
    for task, stories in tasks_val.items():
        per_task[task] = evaluate_accuracy(
            net, encoder.encode_all(stories), n_samples=1, rng=rng
        )
    return net, encoder, metrics, per_task
