"""Distillation pre-training: losses, schedule, AdamW and the training loop.

The student learns to reproduce the teacher's utterance embedding. Two
objectives are available: squared L2 distance (``mse-kd``) and a symmetric
InfoNCE over in-batch pairs with a learnable temperature (``infonce``).
Gradients reach only the student (and the temperature); teacher targets enter
every step as constants.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .checkpoint import Checkpoint, OptimState, average_checkpoints, save_checkpoint
from .data import iterate_batches
from .errors import (
    ConfigError,
    ContractError,
    DegenerateEmbeddingError,
    DimensionError,
    IncompatibleCheckpointError,
    NumericError,
)
from .model import StudentEncoder, embed_signal
from .numerics import GradTape, Tensor, as_tensor, backward, exp, log_softmax, sqrt, stack, transpose

log = logging.getLogger(__name__)

MODES = ("mse-kd", "infonce")
TEMPERATURE_KEY = "log_temperature"
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "mse-kd"
    peak_lr: float = 3e-5
    warmup_steps: int = 5000
    total_steps: int = 50000
    batch_size: int = 16
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    checkpoint_every: int = 5000
    average_last_k: int = 10
    seed: int = 0
    log_every: int = 100
    init_temperature: float = 0.07

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if not 0 < self.warmup_steps <= self.total_steps:
            raise ConfigError("warmup_steps: need 0 < warmup_steps <= total_steps")
        if self.batch_size < 1 or (self.mode == "infonce" and self.batch_size < 2):
            raise ConfigError("batch_size: must be >= 1 (>= 2 for infonce)")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas: need two values in [0, 1)")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ConfigError("peak_lr/weight_decay: must be non-negative")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every/log_every: must be positive")
        if self.average_last_k < 1:
            raise ConfigError("average_last_k: must be >= 1")
        if not self.init_temperature > 0:
            raise ConfigError("init_temperature: must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class ContrastiveState:
    log_temperature: float = math.log(0.07)

    @property
    def temperature(self) -> float:
        return math.exp(self.log_temperature)


# losses

def mse_loss(student_emb, teacher_emb) -> Tensor:
    """Per-example squared L2 distance, averaged over the batch."""
    s, t = as_tensor(student_emb), as_tensor(teacher_emb)
    if s.shape != t.shape or s.ndim != 2:
        raise DimensionError(f"mse_loss needs equal [B, d] inputs, got {s.shape} and {t.shape}")
    diff = s - t
    return (diff * diff).sum() * (1.0 / s.shape[0])


def _check_rows(x: Tensor, what: str):
    norms = np.linalg.norm(x.data, axis=1)
    if np.any(norms == 0):
        raise DegenerateEmbeddingError(f"{what} row(s) {np.flatnonzero(norms == 0).tolist()} have zero norm")


def _unit_rows(x: Tensor) -> Tensor:
    return x / sqrt((x * x).sum(axis=1, keepdims=True))


def infonce_loss(student_emb, teacher_emb, state) -> Tensor:
    """Symmetric in-batch InfoNCE on cosine similarities scaled by 1/temperature.

    ``state`` is a :class:`ContrastiveState` or a scalar Tensor holding the
    log temperature (pass a tracked Tensor to learn it).
    """
    s, t = as_tensor(student_emb), as_tensor(teacher_emb)
    if s.shape != t.shape or s.ndim != 2:
        raise DimensionError(f"infonce_loss needs equal [B, d] inputs, got {s.shape} and {t.shape}")
    b = s.shape[0]
    if b < 2:
        raise ContractError("infonce_loss needs a batch of at least 2")
    _check_rows(s, "student")
    _check_rows(t, "teacher")
    log_tau = state if isinstance(state, Tensor) else Tensor(state.log_temperature)
    logits = (_unit_rows(s) @ transpose(_unit_rows(t))) * exp(-log_tau)
    eye = np.eye(b)
    s2t = -(log_softmax(logits) * eye).sum() * (1.0 / b)
    t2s = -(log_softmax(transpose(logits)) * eye).sum() * (1.0 / b)
    return (s2t + t2s) * 0.5


def positive_pair_similarity(student_emb, teacher_emb) -> float:
    """Mean cosine similarity between row i of each input."""
    s = np.asarray(getattr(student_emb, "data", student_emb), dtype=np.float64)
    t = np.asarray(getattr(teacher_emb, "data", teacher_emb), dtype=np.float64)
    if s.shape != t.shape or s.ndim != 2 or s.shape[0] < 1:
        raise DimensionError(f"need equal non-empty [B, d] inputs, got {s.shape} and {t.shape}")
    ns, nt = np.linalg.norm(s, axis=1), np.linalg.norm(t, axis=1)
    if np.any(ns == 0) or np.any(nt == 0):
        raise DegenerateEmbeddingError("zero-norm embedding row")
    return float(np.mean(np.sum(s * t, axis=1) / (ns * nt)))


# optimisation

def lr_at_step(config: TrainConfig, step: int) -> float:
    """Linear ramp 0 -> peak over warmup, then linear decay to 0 at total_steps."""
    if not 0 <= step <= config.total_steps:
        raise ContractError(f"step {step} outside [0, {config.total_steps}]")
    if step <= config.warmup_steps:
        return config.peak_lr * (step / config.warmup_steps)
    return config.peak_lr * ((config.total_steps - step) / (config.total_steps - config.warmup_steps))


def adamw_step(params: dict, grads: dict, opt: OptimState, lr: float, config: TrainConfig):
    """One decoupled-weight-decay Adam update. Returns ``(new_params, opt)``.

    ``opt`` is advanced in place. Parameters without a gradient are treated as
    having a zero gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r} at optimizer step {opt.t + 1}")
    b1, b2 = config.betas
    opt.t += 1
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    decay = 1.0 - lr * config.weight_decay
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        m = opt.m[name] * b1
        v = opt.v[name] * b2
        if g is not None:
            m += (1.0 - b1) * g
            v += (1.0 - b2) * (g * g)
        opt.m[name], opt.v[name] = m, v
        out[name] = p * decay - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return out, opt


# evaluation helpers

def embed_examples(encoder: StudentEncoder, examples, threads: int = 1) -> np.ndarray:
    """Pooled embeddings ``[n, d_embed]`` with no gradient tracking, in input order."""
    fn = lambda ex: embed_signal(encoder, ex.signal).data  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(fn, examples))
    else:
        rows = [fn(ex) for ex in examples]
    return np.stack(rows) if rows else np.zeros((0, encoder.config.d_embed))


def teacher_targets(teacher, examples) -> np.ndarray:
    return np.stack([teacher.embed(teacher.key_for(ex)) for ex in examples])


def heldout_mse(encoder: StudentEncoder, teacher, examples, threads: int = 1) -> float:
    s = embed_examples(encoder, examples, threads)
    t = teacher_targets(teacher, examples)
    if s.shape != t.shape:
        raise DimensionError(f"student width {s.shape[1]} != teacher width {t.shape[1]}")
    return float(np.mean(np.sum((s - t) ** 2, axis=1)))


def heldout_similarity(encoder: StudentEncoder, teacher, examples, threads: int = 1) -> float:
    return positive_pair_similarity(embed_examples(encoder, examples, threads), teacher_targets(teacher, examples))


# training loop

@dataclass
class PretrainResult:
    encoder: StudentEncoder
    log: list
    checkpoints: list = field(default_factory=list)
    temperature: float | None = None


def log_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def pretrain(student: StudentEncoder, teacher, dataset, config: TrainConfig, heldout=None,
             out_dir=None, threads: int = 1, save_optimizer: bool = False) -> PretrainResult:
    """Distil ``teacher`` into ``student`` for ``config.total_steps`` AdamW steps.

    ``student`` is updated in place and also returned (possibly replaced by the
    average of the last ``average_last_k`` checkpoints). With ``heldout``, the
    mean positive-pair similarity over its first 256 examples is logged every
    ``log_every`` steps as ``s_plus``. With ``out_dir``, checkpoints and
    ``train_log.jsonl`` are written there.
    """
    if len(dataset) < config.batch_size:
        raise ConfigError(f"dataset of {len(dataset)} examples is smaller than one batch ({config.batch_size})")
    if student.config.d_embed != teacher.d_embed:
        raise DimensionError(f"student d_embed {student.config.d_embed} != teacher d_embed {teacher.d_embed}")
    infonce = config.mode == "infonce"
    monitor = list(heldout[:256]) if heldout else []
    targets = {ex.id: teacher.embed(teacher.key_for(ex)) for ex in dataset}
    digest = student.config.digest()
    out_dir = Path(out_dir) if out_dir is not None else None

    params = dict(student.params)
    if infonce:
        params[TEMPERATURE_KEY] = np.array(math.log(config.init_temperature))
    opt = OptimState.zeros_like(params)
    records, checkpoints = [], []
    step, epoch = 0, 0

    while step < config.total_steps:
        for batch in iterate_batches(dataset, config.batch_size, config.seed, epoch, drop_last=infonce):
            step += 1
            leaves = {n: Tensor(a, requires_grad=True) for n, a in params.items()}
            with GradTape() as tape:
                emb = stack([embed_signal(student, ex.signal, leaves) for ex in batch.examples])
                tgt = Tensor._wrap(np.stack([targets[ex.id] for ex in batch.examples]))
                if infonce:
                    loss = infonce_loss(emb, tgt, leaves[TEMPERATURE_KEY])
                else:
                    loss = mse_loss(emb, tgt)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at step {step}")
            grads = _named_grads(tape, loss, leaves)
            lr = lr_at_step(config, step)
            record = {"step": step, "lr": lr, "loss": loss.item()}
            if infonce:
                record["tau"] = math.exp(float(params[TEMPERATURE_KEY]))
            params, opt = adamw_step(params, grads, opt, lr, config)
            student.update({n: a for n, a in params.items() if n != TEMPERATURE_KEY})

            if monitor and (step % config.log_every == 0 or step == config.total_steps):
                record["s_plus"] = heldout_similarity(student, teacher, monitor, threads)
            records.append(record)

            if step % config.checkpoint_every == 0 or step == config.total_steps:
                ckpt = Checkpoint(step=step, params=dict(student.params), config_digest=digest,
                                  opt=_student_opt(opt, student) if save_optimizer else None)
                checkpoints.append(ckpt)
                if out_dir is not None:
                    save_checkpoint(out_dir / f"ckpt_{step:07d}.xmdc", ckpt)
            if step == config.total_steps:
                break
        epoch += 1

    if config.average_last_k > 1 and len(checkpoints) > 1:
        final = average_checkpoints(checkpoints[-config.average_last_k:])
        student.update(final.params)
    if out_dir is not None:
        atomic_write_text(out_dir / "train_log.jsonl", "".join(log_line(r) + "\n" for r in records))
    tau = math.exp(float(params[TEMPERATURE_KEY])) if infonce else None
    return PretrainResult(student, records, checkpoints, tau)


def _named_grads(tape, loss, leaves: dict) -> dict:
    by_leaf = backward(tape, loss)
    return {name: by_leaf[leaf] for name, leaf in leaves.items() if leaf in by_leaf}


def _student_opt(opt: OptimState, student: StudentEncoder) -> OptimState:
    names = student.names()
    return OptimState({n: opt.m[n].copy() for n in names}, {n: opt.v[n].copy() for n in names}, opt.t)


def encoder_from_checkpoint(ckpt: Checkpoint, config) -> StudentEncoder:
    if ckpt.config_digest != config.digest():
        raise IncompatibleCheckpointError("checkpoint config digest does not match the student config")
    return StudentEncoder(config, ckpt.params)
