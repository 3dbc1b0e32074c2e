"""Downstream evaluation: linear heads, ridge probes, k-shot sampling, metrics.

Three settings are supported, all with a single linear layer on top of the
pooled utterance embedding:

* full-data transfer: frozen encoder, analytic ridge fit on the train split;
* few-shot transfer: the same, on ``k`` examples per class drawn from it;
* fine-tuning: head and (optionally) encoder trained with AdamW + warmup.

Regression tasks are also scored as classification by rounding predictions
to integers in ``[lo, hi]`` (``acc{N}``) and by sign (``acc2``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .checkpoint import Checkpoint, OptimState, average_checkpoints
from .data import iterate_batches, split_dataset
from .distill import TrainConfig, adamw_step, embed_examples, lr_at_step
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DomainError,
    InsufficientDataError,
    NumericError,
    SingularSystemError,
    UndefinedCorrelationError,
)
from .model import StudentEncoder, embed_signal
from .numerics import GradTape, SeededRng, Tensor, backward, log_softmax, stack

TASK_KINDS = ("regression", "classification", "multihead")


@dataclass(frozen=True)
class Task:
    kind: str = "classification"
    n_classes: object = 7
    lo: int = -3
    hi: int = 3
    name: str = "task"

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind: expected one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == "multihead":
            heads = tuple(int(n) for n in self.n_classes)
            if not heads or min(heads) < 2:
                raise ConfigError("n_classes: multihead needs a list of class counts >= 2")
            object.__setattr__(self, "n_classes", heads)
        elif self.kind == "classification" and int(self.n_classes) < 2:
            raise ConfigError("n_classes: must be >= 2")
        if self.kind == "regression" and self.lo >= self.hi:
            raise ConfigError("lo/hi: need lo < hi")

    @property
    def n_out(self) -> int:
        if self.kind == "regression":
            return 1
        if self.kind == "multihead":
            return sum(self.n_classes)
        return int(self.n_classes)


@dataclass
class LinearHead:
    weights: np.ndarray
    bias: np.ndarray
    task: Task

    def __post_init__(self):
        if self.weights.ndim != 2 or self.weights.shape[1] != self.task.n_out or self.bias.shape != (self.task.n_out,):
            raise ConfigError(f"head shapes {self.weights.shape}/{self.bias.shape} do not fit task {self.task}")

    @classmethod
    def from_ridge(cls, w: np.ndarray, task: Task) -> "LinearHead":
        return cls(w[:-1], w[-1], task)

    def outputs(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights + self.bias


@dataclass(frozen=True)
class RidgeConfig:
    alpha: float = 100.0

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ConfigError("alpha: must be finite and non-negative")


@dataclass(frozen=True)
class FewShotSpec:
    k: int
    classes: tuple
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k: must be >= 1")
        object.__setattr__(self, "classes", tuple(self.classes))


@dataclass
class MetricReport:
    task: str
    metrics: dict
    provenance: dict = field(default_factory=dict)
    variants: dict = field(default_factory=dict)
    history: list = field(default_factory=list, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {"task": self.task, "metrics": self.metrics, "provenance": self.provenance}
        if self.variants:
            d["variants"] = self.variants
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


# ridge regression

def ridge_fit(X, y, config: RidgeConfig = RidgeConfig(), fit_bias: bool = True) -> np.ndarray:
    """Solve ``(X'X + alpha*P) w = X'y`` with a ones column appended to X.

    ``P`` is the identity except for the bias entry, which is not penalised.
    Returns ``[d+1, m]`` with the bias in the last row (``[d, m]`` without it).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ContractError(f"X must be a non-empty [n, d] matrix, got shape {X.shape}")
    squeeze = y.ndim == 1
    y = y.reshape(-1, 1) if squeeze else y
    if y.shape[0] != X.shape[0]:
        raise ContractError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    Xa = np.hstack([X, np.ones((X.shape[0], 1))]) if fit_bias else X
    penalty = np.full(Xa.shape[1], float(config.alpha))
    if fit_bias:
        penalty[-1] = 0.0
    A = Xa.T @ Xa + np.diag(penalty)
    if config.alpha == 0 and np.linalg.matrix_rank(Xa) < Xa.shape[1]:
        raise SingularSystemError("rank-deficient design with alpha=0")
    try:
        w = np.linalg.solve(A, Xa.T @ y)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(str(e)) from None
    return w[:, 0] if squeeze else w


def ridge_predict(w, X, fit_bias: bool = True) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X @ w[:-1] + w[-1] if fit_bias else X @ w


# sampling and rounding

def retrofit_round(pred: float, lo: int, hi: int) -> int:
    """Nearest integer, halves away from zero, clamped to ``[lo, hi]``."""
    if not math.isfinite(pred):
        raise DomainError(f"cannot round non-finite prediction {pred!r}")
    mag = abs(pred)
    whole = math.floor(mag)
    # mag - whole is exact, unlike mag + 0.5
    r = whole + (1 if mag - whole >= 0.5 else 0)
    return int(min(max(math.copysign(r, pred), lo), hi))


def sample_k_shot(dataset, spec: FewShotSpec, label_fn=None) -> list:
    """Exactly ``k`` examples of every class in ``spec.classes``, seeded, without replacement."""
    label_fn = label_fn or (lambda ex: ex.label)
    pools = {c: [] for c in spec.classes}
    for i, ex in enumerate(dataset):
        lab = label_fn(ex)
        if lab in pools:
            pools[lab].append(i)
    rng = SeededRng(spec.seed, 0xF5)
    out = []
    for c in spec.classes:
        if len(pools[c]) < spec.k:
            raise InsufficientDataError(f"class {c!r} has {len(pools[c])} examples, need k={spec.k}")
        out.extend(dataset[pools[c][j]] for j in rng.choice(len(pools[c]), spec.k))
    return out


# metrics

def metric_mae(pred, target) -> float:
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.size < 1:
        raise ContractError("mae needs equal-length non-empty inputs")
    return float(np.mean(np.abs(p - t)))


def metric_pearson(pred, target) -> float:
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or p.size < 2:
        raise ContractError("pearson needs equal-length inputs of at least 2 values")
    dp, dt = p - p.mean(), t - t.mean()
    sp, st = np.sqrt(np.sum(dp * dp)), np.sqrt(np.sum(dt * dt))
    if sp == 0 or st == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant input")
    return float(np.sum(dp * dt) / (sp * st))


def _check_pair(pred, target):
    if len(pred) != len(target):
        raise ContractError(f"prediction/target lengths differ ({len(pred)} vs {len(target)})")
    if len(pred) == 0:
        raise ContractError("empty prediction list")


def metric_weighted_f1(pred, target) -> float:
    """Per-class F1 averaged with weights equal to true-class support.

    Accumulated in exact rationals, so the result is the correctly rounded float.
    """
    pred, target = list(pred), list(target)
    _check_pair(pred, target)
    total = Fraction(0)
    for c in set(target):
        tp = sum(1 for p, t in zip(pred, target) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, target) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, target) if p != c and t == c)
        total += Fraction(2 * tp * (tp + fn), 2 * tp + fp + fn)
    return float(total / len(target))


def metric_accuracy(pred, target) -> float:
    pred, target = list(pred), list(target)
    _check_pair(pred, target)
    return sum(1 for p, t in zip(pred, target) if p == t) / len(target)


def metric_exact_match(pred, target) -> float:
    """Fraction of examples on which every head is right."""
    pred, target = [tuple(p) for p in pred], [tuple(t) for t in target]
    _check_pair(pred, target)
    for p, t in zip(pred, target):
        if len(p) != len(t):
            raise ContractError(f"label tuple arity differs ({len(p)} vs {len(t)})")
    return sum(1 for p, t in zip(pred, target) if p == t) / len(target)


def sign_classes(values, lo: int, hi: int) -> list:
    """Two-class split used for acc2: rounded value >= 0 is positive.

    Exact zeros count as positive.
    """
    return [int(retrofit_round(v, lo, hi) >= 0) for v in values]


def regression_metrics(pred, target, lo: int, hi: int) -> dict:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    rp = [retrofit_round(v, lo, hi) for v in pred]
    rt = [retrofit_round(v, lo, hi) for v in target]
    sp, st = sign_classes(pred, lo, hi), sign_classes(target, lo, hi)
    out = {
        "mae": metric_mae(pred, target),
        "weighted_f1": metric_weighted_f1(sp, st),
        "acc2": metric_accuracy(sp, st),
        f"acc{hi - lo + 1}": metric_accuracy(rp, rt),
    }
    try:
        out["pearson"] = metric_pearson(pred, target)
    except UndefinedCorrelationError:
        out["pearson"] = None
    return out


def classification_metrics(pred, target) -> dict:
    return {"accuracy": metric_accuracy(pred, target), "weighted_f1": metric_weighted_f1(pred, target)}


def multihead_metrics(pred, target) -> dict:
    out = {"exact_match": metric_exact_match(pred, target)}
    for h in range(len(target[0])):
        out[f"accuracy_head{h}"] = metric_accuracy([p[h] for p in pred], [t[h] for t in target])
    return out


# label handling shared by probes and heads

def _labels(examples, task: Task):
    if any(ex.label is None for ex in examples):
        raise DataError("dataset has unlabeled examples")
    if task.kind == "regression":
        return [float(ex.label) for ex in examples]
    if task.kind == "classification":
        labels = [int(ex.label) for ex in examples]
        if any(not 0 <= v < task.n_classes for v in labels):
            raise DataError(f"class labels outside [0, {task.n_classes})")
        return labels
    labels = [tuple(int(v) for v in ex.label) for ex in examples]
    for lab in labels:
        if len(lab) != len(task.n_classes) or any(not 0 <= v < n for v, n in zip(lab, task.n_classes)):
            raise DataError(f"label {lab} does not fit heads {task.n_classes}")
    return labels


def _one_hot(labels, task: Task) -> np.ndarray:
    if task.kind == "classification":
        return np.eye(task.n_classes)[labels]
    blocks = [np.eye(n)[[lab[h] for lab in labels]] for h, n in enumerate(task.n_classes)]
    return np.hstack(blocks)


def _decode(outputs: np.ndarray, task: Task):
    if task.kind == "regression":
        return outputs.reshape(-1).tolist()
    if task.kind == "classification":
        return np.argmax(outputs, axis=1).tolist()
    preds, start = [], 0
    for n in task.n_classes:
        preds.append(np.argmax(outputs[:, start:start + n], axis=1))
        start += n
    return [tuple(int(v) for v in row) for row in np.stack(preds, axis=1)]


def score(pred, target, task: Task) -> dict:
    if task.kind == "regression":
        return regression_metrics(pred, target, task.lo, task.hi)
    if task.kind == "classification":
        return classification_metrics(pred, target)
    return multihead_metrics(pred, target)


def class_label_fn(task: Task):
    """Class key used for k-shot sampling; regression labels are rounded."""
    if task.kind == "regression":
        return lambda ex: retrofit_round(float(ex.label), task.lo, task.hi)
    if task.kind == "classification":
        return lambda ex: int(ex.label)
    return lambda ex: tuple(int(v) for v in ex.label)


def task_classes(task: Task) -> tuple:
    if task.kind == "regression":
        return tuple(range(task.lo, task.hi + 1))
    if task.kind == "classification":
        return tuple(range(task.n_classes))
    raise ConfigError("k-shot sampling over multihead labels needs explicit classes")


def _provenance(encoder: StudentEncoder, extra: dict | None) -> dict:
    prov = {"config_digest": encoder.config.digest().hex(), "checkpoint_step": None, "seed": None}
    prov.update(extra or {})
    return prov


# probes

def run_probe(encoder: StudentEncoder, dataset, task: Task, ridge: RidgeConfig = RidgeConfig(), *,
              split_seed: int = 0, few_shot: FewShotSpec | None = None, ridge_target: str = "direct",
              threads: int = 1, provenance: dict | None = None) -> MetricReport:
    """Frozen-encoder ridge probe, fitted on the train split, scored on the test split.

    ``ridge_target="onehot"`` fits a regression task as classification over its
    rounded classes (predictions are then class values).
    """
    if ridge_target not in ("direct", "onehot"):
        raise ConfigError(f"ridge_target: expected 'direct' or 'onehot', got {ridge_target!r}")
    train, _, test = split_dataset(dataset, split_seed)
    if few_shot is not None:
        train = sample_k_shot(train, few_shot, class_label_fn(task))
    if not train or not test:
        raise InsufficientDataError("train or test split is empty")
    y_train, y_test = _labels(train, task), _labels(test, task)
    x_train = embed_examples(encoder, train, threads)
    x_test = embed_examples(encoder, test, threads)

    if task.kind == "regression" and ridge_target == "onehot":
        classes = task_classes(task)
        rounded = [classes.index(retrofit_round(v, task.lo, task.hi)) for v in y_train]
        w = ridge_fit(x_train, np.eye(len(classes))[rounded], ridge)
        pred = [float(classes[i]) for i in np.argmax(ridge_predict(w, x_test), axis=1)]
    elif task.kind == "regression":
        w = ridge_fit(x_train, np.asarray(y_train), ridge)
        pred = ridge_predict(w, x_test).tolist()
    else:
        w = ridge_fit(x_train, _one_hot(y_train, task), ridge)
        pred = _decode(ridge_predict(w, x_test), task)

    prov = _provenance(encoder, provenance)
    prov.update({"alpha": ridge.alpha, "split_seed": split_seed, "n_train": len(train), "n_test": len(test),
                 "k": few_shot.k if few_shot else None,
                 "sample_seed": few_shot.seed if few_shot else None})
    return MetricReport(task.name, score(pred, y_test, task), prov)


# fine-tuning

def _head_loss(out: Tensor, labels, task: Task) -> Tensor:
    b = out.shape[0]
    if task.kind == "regression":
        diff = out - np.asarray(labels, dtype=np.float64).reshape(-1, 1)
        return (diff * diff).sum() * (1.0 / b)
    if task.kind == "classification":
        return -(log_softmax(out) * np.eye(task.n_classes)[labels]).sum() * (1.0 / b)
    total, start = None, 0
    for h, n in enumerate(task.n_classes):
        part = -(log_softmax(out[:, start:start + n]) * np.eye(n)[[lab[h] for lab in labels]]).sum() * (1.0 / b)
        total = part if total is None else total + part
        start += n
    return total


def _primary(metrics: dict, task: Task) -> float:
    """Higher is better."""
    if task.kind == "regression":
        return -metrics["mae"]
    return metrics["exact_match" if task.kind == "multihead" else "accuracy"]


def trainable_parameter_count(encoder: StudentEncoder, task: Task, freeze_encoder: bool) -> int:
    head = encoder.config.d_embed * task.n_out + task.n_out
    return head + (0 if freeze_encoder else encoder.num_parameters())


def run_finetune_head(encoder: StudentEncoder, dataset, task: Task, config: TrainConfig, *,
                      freeze_encoder: bool = False, split_seed: int = 0, threads: int = 1,
                      provenance: dict | None = None) -> MetricReport:
    """Train a linear head (and the encoder unless frozen); report the best-on-dev checkpoint.

    With ``config.average_last_k > 1`` the average of the last K checkpoints is
    scored too and reported under ``variants["averaged"]``. The encoder passed
    in is never modified; a working copy is trained.
    """
    train, dev, test = split_dataset(dataset, split_seed)
    if len(train) < config.batch_size or not dev or not test:
        raise InsufficientDataError("splits too small for the requested batch size")
    enc = encoder.copy()
    y = {ex.id: lab for ex, lab in zip(train, _labels(train, task))}
    y_dev, y_test = _labels(dev, task), _labels(test, task)

    d, n_out = enc.config.d_embed, task.n_out
    bound = math.sqrt(6.0 / (d + n_out))
    params = {
        "head.weight": SeededRng(config.seed, 0x4EAD).uniform(-bound, bound, size=(d, n_out)),
        "head.bias": np.zeros(n_out),
    }
    if not freeze_encoder:
        params.update(enc.params)
    frozen_x = {ex.id: row for ex, row in zip(train, embed_examples(enc, train, threads))} if freeze_encoder else None

    def evaluate(p, examples, labels):
        enc_eval = StudentEncoder(enc.config, {n: p[n] for n in enc.names()}) if not freeze_encoder else enc
        x = embed_examples(enc_eval, examples, threads)
        return score(_decode(x @ p["head.weight"] + p["head.bias"], task), labels, task)

    opt = OptimState.zeros_like(params)
    digest = enc.config.digest()
    history, ckpts, dev_scores = [], [], []
    step, epoch = 0, 0
    while step < config.total_steps:
        for batch in iterate_batches(train, config.batch_size, config.seed, epoch):
            step += 1
            leaves = {n: Tensor(a, requires_grad=True) for n, a in params.items()}
            with GradTape() as tape:
                if freeze_encoder:
                    emb = Tensor._wrap(np.stack([frozen_x[ex.id] for ex in batch.examples]))
                else:
                    emb = stack([embed_signal(enc, ex.signal, leaves) for ex in batch.examples])
                out = emb @ leaves["head.weight"] + leaves["head.bias"]
                loss = _head_loss(out, [y[ex.id] for ex in batch.examples], task)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite fine-tuning loss at step {step}")
            by_leaf = backward(tape, loss)
            grads = {n: by_leaf[t] for n, t in leaves.items() if t in by_leaf}
            lr = lr_at_step(config, step)
            params, opt = adamw_step(params, grads, opt, lr, config)
            history.append({"step": step, "lr": lr, "loss": loss.item()})
            if step % config.checkpoint_every == 0 or step == config.total_steps:
                ckpts.append(Checkpoint(step, dict(params), digest))
                dev_scores.append(_primary(evaluate(params, dev, y_dev), task))
            if step == config.total_steps:
                break
        epoch += 1

    best = int(np.argmax(dev_scores))
    report = MetricReport(task.name, evaluate(ckpts[best].params, test, y_test), history=history)
    if config.average_last_k > 1 and len(ckpts) > 1:
        avg = average_checkpoints(ckpts[-config.average_last_k:])
        report.variants["averaged"] = evaluate(avg.params, test, y_test)
    prov = _provenance(enc, provenance)
    prov.update({"seed": config.seed, "split_seed": split_seed, "best_step": ckpts[best].step,
                 "freeze_encoder": freeze_encoder,
                 "trainable_params": trainable_parameter_count(enc, task, freeze_encoder),
                 "n_train": len(train), "n_test": len(test)})
    report.provenance = prov
    return report
