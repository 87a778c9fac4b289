"""Downstream utility of a learned encoder: linear probing and K-shot tuning.

Linear probing freezes the encoder, standardizes its mean-pooled features
with train-set statistics, and fits a multinomial logistic head by full-batch
gradient descent. Few-shot fine-tuning selects exactly K seeded samples per
class and updates the whole model (plus a fresh linear head) non-privately,
with random horizontal flips as the only augmentation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import data, mae, seeds
from .dp_optim import DpOptimConfig, dp_adamw_step, init_adamw_state


class ProbeError(RuntimeError):
    pass


class FewShotSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    num_classes: int
    train_count: int
    eval_count: int
    feature_dim: int
    seed: int


@dataclass(frozen=True)
class FewShotSpec:
    shots: int
    epochs: int = 15
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05

    def __post_init__(self):
        if self.shots < 1:
            raise FewShotSpecError(f"shots must be >= 1, got {self.shots}")
        if self.epochs < 1 or self.batch_size < 1:
            raise FewShotSpecError("epochs and batch size must be >= 1")


def _require_labels(manifest: data.DatasetManifest, side: str) -> np.ndarray:
    if manifest.labels is None:
        raise ProbeError(f"{side} dataset {manifest.root} has no labels file")
    return manifest.labels


def extract_features(params: mae.MaeParams, manifest: data.DatasetManifest,
                     chunk: int = 128) -> np.ndarray:
    """Pooled encoder features for every sample, in index order."""
    feats = np.empty((manifest.n, params.config.latent_dim))
    for start in range(0, manifest.n, chunk):
        idx = range(start, min(start + chunk, manifest.n))
        feats[start : start + len(idx)] = mae.encode_features(
            params, data.fetch(manifest, idx))
    return feats


def fit_logistic(features: np.ndarray, labels: np.ndarray, num_classes: int,
                 tol: float = 1e-6, max_iters: int = 5000):
    """Multinomial logistic regression by full-batch gradient descent.

    Runs until the gradient infinity-norm drops below `tol` (or max_iters as
    a safety stop) with backtracking on the step size. Deterministic.
    """
    n, d = features.shape
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), labels] = 1.0
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)

    def loss_grad(w, b):
        logits = features @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
        diff = (p - onehot) / n
        return loss, features.T @ diff, diff.sum(axis=0)

    lr = 1.0
    loss, gw, gb = loss_grad(w, b)
    for _ in range(max_iters):
        if max(np.abs(gw).max(), np.abs(gb).max()) < tol:
            break
        new_w, new_b = w - lr * gw, b - lr * gb
        new_loss, new_gw, new_gb = loss_grad(new_w, new_b)
        if new_loss <= loss:
            w, b, loss, gw, gb = new_w, new_b, new_loss, new_gw, new_gb
            lr *= 1.1
        else:
            lr *= 0.5
    return w, b


def _accuracy(features, labels, w, b) -> float:
    return float(np.mean(np.argmax(features @ w + b, axis=1) == labels))


def linear_probe(params: mae.MaeParams, train: data.DatasetManifest,
                 eval_set: data.DatasetManifest, seed: int) -> ProbeResult:
    """Frozen-encoder linear separability of pooled features.

    The encoder is read, never written; features are standardized with
    train-set mean and standard deviation before the head is fit.
    """
    train_labels = _require_labels(train, "train")
    eval_labels = _require_labels(eval_set, "eval")
    missing = set(np.unique(eval_labels)) - set(np.unique(train_labels))
    if missing:
        raise ProbeError(f"classes {sorted(missing)} present in eval but absent in train")
    num_classes = int(train_labels.max()) + 1

    train_feats = extract_features(params, train)
    eval_feats = extract_features(params, eval_set)
    mu = train_feats.mean(axis=0)
    sd = np.maximum(train_feats.std(axis=0), 1e-8)
    w, b = fit_logistic((train_feats - mu) / sd, train_labels, num_classes)
    acc = _accuracy((eval_feats - mu) / sd, eval_labels, w, b)
    return ProbeResult(accuracy=acc, num_classes=num_classes, train_count=train.n,
                       eval_count=eval_set.n, feature_dim=params.config.latent_dim,
                       seed=seed)


def select_shots(labels: np.ndarray, shots: int, seed: int) -> np.ndarray:
    """Exactly `shots` indices per class, drawn without replacement."""
    rng = seeds.derive(seed, "shot_select")
    picked = []
    for cls in np.unique(labels):
        pool = np.nonzero(labels == cls)[0]
        if pool.size < shots:
            raise FewShotSpecError(
                f"class {int(cls)} has {pool.size} samples, fewer than K={shots}"
            )
        picked.append(rng.choice(pool, size=shots, replace=False))
    return np.sort(np.concatenate(picked))


def few_shot_finetune(params: mae.MaeParams, spec: FewShotSpec,
                      train: data.DatasetManifest, eval_set: data.DatasetManifest,
                      seed: int) -> ProbeResult:
    """Select K samples per class and fine-tune the whole model on them.

    Non-private supervised training of encoder plus a fresh zero-initialized
    linear head; the caller's parameter object is left untouched.
    """
    train_labels = _require_labels(train, "train")
    eval_labels = _require_labels(eval_set, "eval")
    num_classes = int(max(train_labels.max(), eval_labels.max())) + 1
    chosen = select_shots(train_labels, spec.shots, seed)

    images = data.fetch(train, chosen)
    labels = train_labels[chosen]
    n = chosen.size

    work = params.replaced(params.to_arrays())  # private copy to update
    head_w = ad.parameter(np.zeros((params.config.latent_dim, num_classes)), "head/w")
    head_b = ad.parameter(np.zeros(num_classes), "head/b")
    tensors = work.values() + [head_w, head_b]

    theta = np.concatenate([t.data.reshape(-1) for t in tensors])
    spans = np.cumsum([0] + [t.data.size for t in tensors])
    state = init_adamw_state(theta.size)
    opt = DpOptimConfig(base_lr=spec.lr, weight_decay=spec.weight_decay,
                        total_steps=max(1, spec.epochs * ((n + spec.batch_size - 1)
                                                          // spec.batch_size)))

    def publish(theta):
        for t, start, stop in zip(tensors, spans, spans[1:]):
            t.data = theta[start:stop].reshape(t.data.shape).copy()

    step = 0
    for epoch in range(spec.epochs):
        rng = seeds.derive(seed, "augment", epoch)
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5
        for start in range(0, n, spec.batch_size):
            idx = order[start : start + spec.batch_size]
            batch = images[idx].copy()
            batch[flips[idx]] = batch[flips[idx]][..., ::-1]
            publish(theta)

            feats = ad.mean(mae.encode_all_tokens(work, batch), axes=(1,))
            logits = ad.add(ad.matmul(feats, head_w), head_b)
            probs = ad.softmax(logits)
            onehot = np.zeros((idx.size, num_classes))
            onehot[np.arange(idx.size), labels[idx]] = 1.0
            picked = ad.mul(ad.log(probs), ad.tensor(onehot, batched=True))
            loss = ad.scale(ad.reduce_sum(picked), -1.0 / idx.size)

            grads = ad.backward(loss, tensors)
            grad_vec = np.concatenate([grads[t.name].reshape(-1) for t in tensors])
            theta, state = dp_adamw_step(theta, state, grad_vec, opt,
                                         lr=_cosine_lr(spec.lr, step, opt.total_steps))
            step += 1

    publish(theta)
    eval_feats = extract_features(work, eval_set)
    pred = np.argmax(eval_feats @ head_w.data + head_b.data, axis=1)
    acc = float(np.mean(pred == eval_labels))
    return ProbeResult(accuracy=acc, num_classes=num_classes, train_count=n,
                       eval_count=eval_set.n, feature_dim=params.config.latent_dim,
                       seed=seed)


def _cosine_lr(base: float, step: int, total: int) -> float:
    progress = min(1.0, step / max(1, total - 1))
    return base * 0.5 * (1.0 + np.cos(np.pi * progress))


def append_result(path, run_id: str, task: str, shots, result: ProbeResult) -> None:
    """One comma-separated line per evaluation: run, task, K, accuracy, seed."""
    header = "run_id,task,shots,accuracy,seed\n"
    fresh = not os.path.exists(path)
    with open(path, "a") as f:
        if fresh:
            f.write(header)
        f.write(f"{run_id},{task},{shots},{result.accuracy:.12g},{result.seed}\n")
