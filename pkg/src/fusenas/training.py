"""Training loop for decoded networks: Adam, step-decay schedule, evaluation.

Single-threaded and fully deterministic given the config seed: weight init
comes from the build seed, batch order from the config seed, and the stepped
learning rate divides the base rate by the decay factor after each epoch
listed in ``decay_epochs``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .arch import decode
from .genome import DEFAULT_GENE_RANGES, GeneSpace, Genome, deserialize, serialize
from .network import Network, build
from .signal import FeatureDataset


class NumericError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 25
    base_lr: float = 0.001
    decay_epochs: tuple[int, ...] = (12, 20)
    decay_factor: float = 10.0
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch; decays take effect the epoch after."""
    drops = sum(1 for e in cfg.decay_epochs if epoch > e)
    return cfg.base_lr / (cfg.decay_factor ** drops)


class Adam:
    """Adam with per-parameter moment state, addressed by parameter path."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, net: Network, lr: float):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for path, holder, key in net.parameters():
            g = holder.grads[key]
            if path not in self.m:
                self.m[path] = np.zeros_like(g)
                self.v[path] = np.zeros_like(g)
            self.m[path] = self.beta1 * self.m[path] + (1 - self.beta1) * g
            self.v[path] = self.beta2 * self.v[path] + (1 - self.beta2) * g * g
            m_hat = self.m[path] / b1c
            v_hat = self.v[path] / b2c
            holder.params[key] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _batch_arrays(ds: FeatureDataset, idx: np.ndarray):
    return ds.semg[idx], ds.acc[idx], ds.fused[idx], ds.labels[idx]


def train_step(net: Network, adam: Adam, batch, lr: float) -> float:
    """One forward/backward/update on a labeled batch; returns mean cross-entropy."""
    semg, acc, fused, labels = batch
    probs = net.forward(semg, acc, fused)
    loss = L.cross_entropy(probs, labels)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss} on batch of {len(labels)}")
    net.zero_grads()
    net.backward(L.cross_entropy_grad(probs, labels))
    adam.step(net, lr)
    return loss


def dataset_loss(net: Network, ds: FeatureDataset, batch_size: int = 256) -> float:
    """Mean cross-entropy over a dataset, batched for memory."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    total = 0.0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        semg, acc, fused, labels = _batch_arrays(ds, idx)
        probs = net.forward(semg, acc, fused)
        p = probs[np.arange(len(labels)), labels]
        total += float(-np.log(np.clip(p, 1e-12, None)).sum())
    return total / len(ds)


def train(net: Network, train_set: FeatureDataset, valid_set: FeatureDataset,
          cfg: TrainConfig, adam: Adam | None = None) -> tuple[Network, list[dict]]:
    """Train for cfg.epochs and log {epoch, train_loss, valid_loss, lr} per epoch."""
    if len(train_set) == 0 or len(valid_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    adam = adam or Adam()
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            losses.append(train_step(net, adam, _batch_arrays(train_set, idx), lr))
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "valid_loss": dataset_loss(net, valid_set),
            "lr": lr,
        })
    return net, history


def predict(net: Network, ds: FeatureDataset, batch_size: int = 256) -> np.ndarray:
    out = np.empty(len(ds), dtype=np.int64)
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        semg, acc, fused, _ = _batch_arrays(ds, idx)
        out[idx] = net.forward(semg, acc, fused).argmax(axis=1)
    return out


def evaluate_accuracy(net: Network, test_set: FeatureDataset) -> float:
    """100 * correct / total with argmax predictions."""
    if len(test_set) == 0:
        raise ValueError("cannot evaluate on an empty set")
    correct = int((predict(net, test_set) == test_set.labels).sum())
    return 100.0 * correct / len(test_set)


def accuracy_percent(predictions: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("cannot compute accuracy of zero samples")
    return 100.0 * int((np.asarray(predictions) == np.asarray(labels)).sum()) / len(labels)


# ---------------------------------------------------------------------------
# Test-stage adaptation
# ---------------------------------------------------------------------------

def split_adaptation(test_set: FeatureDataset, fraction: float = 0.1,
                     seed: int = 0) -> tuple[FeatureDataset, FeatureDataset]:
    """Split off a class-stratified adaptation subset from the test windows.

    Per class, round(fraction * count) windows (at least 1) go to the
    adaptation set; the remainder is the evaluation set.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    adapt_idx = []
    for cls in np.unique(test_set.labels):
        cls_idx = np.flatnonzero(test_set.labels == cls)
        k = max(1, int(round(fraction * len(cls_idx))))
        adapt_idx.extend(rng.permutation(cls_idx)[:k])
    adapt_idx = np.sort(np.array(adapt_idx, dtype=np.int64))
    mask = np.ones(len(test_set), dtype=bool)
    mask[adapt_idx] = False
    return test_set.subset(adapt_idx), test_set.subset(np.flatnonzero(mask))


def _record_keys(ds: FeatureDataset) -> set:
    return {(ds.fused[i].tobytes(), int(ds.labels[i])) for i in range(len(ds))}


def fine_tune(net: Network, adapt_set: FeatureDataset, epochs: int = 3,
              lr: float = 1e-4, seed: int = 0,
              eval_set: FeatureDataset | None = None) -> Network:
    """Continue Adam training briefly on the adaptation subset.

    If ``eval_set`` is given it must be disjoint from the adaptation windows.
    """
    if eval_set is not None and len(adapt_set) and len(eval_set):
        if _record_keys(adapt_set) & _record_keys(eval_set):
            raise ValueError("adaptation and evaluation sets overlap")
    if epochs == 0 or len(adapt_set) == 0:
        return net
    adam = Adam()
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(adapt_set))
        for start in range(0, len(order), 64):
            idx = order[start:start + 64]
            train_step(net, adam, _batch_arrays(adapt_set, idx), lr)
    return net


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: Network, space: GeneSpace, extra_meta: dict | None = None):
    """Write parameters plus the metadata needed to rebuild the network."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "genome": serialize(Genome(net.graph.genes)),
        "num_classes": net.num_classes,
        "candidate_filters": list(space.candidate_filters),
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {f"param/{p}": holder.params[k] for p, holder, k in net.parameters()}
    arrays["scale/mean"] = net.input_mean
    arrays["scale/std"] = net.input_std
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(path) -> tuple[Network, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        space = GeneSpace(DEFAULT_GENE_RANGES, tuple(meta["candidate_filters"]))
        genome = deserialize(meta["genome"], space)
        net = build(decode(genome, space), meta["num_classes"])
        state = {key[len("param/"):]: data[key] for key in data.files if key.startswith("param/")}
        net.set_state(state)
        net.set_input_scale(data["scale/mean"], data["scale/std"])
    return net, meta
