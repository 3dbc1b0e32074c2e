"""Student encoder and frozen teacher embedders.

The student maps a raw mono signal to a fixed-length utterance embedding:
strided conv front end (GELU after each layer) -> linear feature projection
-> sinusoidal positions -> pre-norm transformer blocks -> final norm ->
optional projection to the teacher width -> mean over time.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    InputTooShortError,
    MissingTargetError,
    NumericError,
    SequenceTooLongError,
)
from .numerics import (
    SeededRng,
    Tensor,
    conv1d,
    conv_out_length,
    gelu,
    layer_norm,
    reduce_mean,
    reshape,
    softmax,
    transpose,
)

LN_EPS = 1e-5


@dataclass(frozen=True)
class StudentConfig:
    conv_layers: tuple = ((64, 8, 4), (64, 4, 2))
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    d_embed: int = 64
    max_positions: int = 512

    def __post_init__(self):
        object.__setattr__(self, "conv_layers", tuple(tuple(int(v) for v in layer) for layer in self.conv_layers))
        self.validate()

    def validate(self):
        if not self.conv_layers:
            raise ConfigError("conv_layers: at least one conv layer is required")
        for i, layer in enumerate(self.conv_layers):
            if len(layer) != 3 or any(v < 1 for v in layer):
                raise ConfigError(f"conv_layers[{i}]: expected positive (channels, kernel, stride), got {layer}")
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "d_embed", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model: {self.d_model} is not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_layers"] = [list(layer) for layer in self.conv_layers]
        return d

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; stored in checkpoints."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).digest()

    def output_length(self, n_samples: int) -> int:
        length = n_samples
        for channels, k, stride in self.conv_layers:
            if length < k:
                return 0
            length = conv_out_length(length, k, stride)
        return length


def _param_shapes(cfg: StudentConfig) -> dict:
    shapes = {}
    c_in = 1
    for i, (c, k, _) in enumerate(cfg.conv_layers):
        shapes[f"conv.{i}.weight"] = (c, c_in, k)
        shapes[f"conv.{i}.bias"] = (c,)
        c_in = c
    d, f = cfg.d_model, cfg.d_ff
    shapes["feat_proj.weight"] = (c_in, d)
    shapes["feat_proj.bias"] = (d,)
    for b in range(cfg.n_layers):
        p = f"blocks.{b}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for m in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{m}"] = (d, d)
            # a key bias shifts every score of a query equally; softmax cancels it
            if m != "k":
                shapes[p + f"attn.b{m}"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    if cfg.d_embed != d:
        shapes["out_proj.weight"] = (d, cfg.d_embed)
        shapes["out_proj.bias"] = (cfg.d_embed,)
    return shapes


def sinusoidal_positions(n_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.flags.writeable = False
    return table


class StudentEncoder:
    """Named float64 parameters plus the config that shapes them.

    ``params`` holds read-only arrays; :meth:`update` swaps in new ones.
    """

    def __init__(self, config: StudentConfig, params: dict):
        expected = _param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter names do not match config (missing {missing}, unexpected {extra})")
        self.config = config
        self.params = {}
        self._positions = sinusoidal_positions(config.max_positions, config.d_model)
        self._frozen_leaves = None
        self.update(params)

    def update(self, params: dict):
        shapes = _param_shapes(self.config)
        for name, value in params.items():
            if name not in shapes:
                raise ConfigError(f"unknown parameter {name!r}")
            arr = np.array(value, dtype=np.float64)
            if arr.shape != shapes[name]:
                raise ConfigError(f"parameter {name}: shape {arr.shape} != {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"parameter {name} has non-finite values")
            arr.flags.writeable = False
            self.params[name] = arr
        self._frozen_leaves = None

    def names(self) -> list:
        return list(_param_shapes(self.config))

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def leaves(self, track: bool = True) -> dict:
        """Tensor views of the parameters; tracked ones collect gradients."""
        if not track:
            if self._frozen_leaves is None:
                self._frozen_leaves = {n: Tensor._wrap(a) for n, a in self.params.items()}
            return self._frozen_leaves
        return {n: Tensor(a, requires_grad=True) for n, a in self.params.items()}

    def copy(self) -> "StudentEncoder":
        return StudentEncoder(self.config, dict(self.params))

    def state_bytes(self) -> bytes:
        return b"".join(n.encode() + self.params[n].tobytes() for n in self.names())


@dataclass
class EncodedSequence:
    hidden: Tensor
    length: int = field(default=0)

    def __post_init__(self):
        self.length = self.hidden.shape[0]
        if self.length < 1:
            raise ValueError("encoded sequence must have at least one step")


def init_student(config: StudentConfig, seed: int) -> StudentEncoder:
    """Scaled-uniform weights, unit norm gains, zero biases."""
    rng = SeededRng(seed)
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            if len(shape) == 3:
                fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
            else:
                fan_in, fan_out = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return StudentEncoder(config, params)


def _params_for(enc, params):
    return enc.leaves(track=False) if params is None else params


def extract_features(enc: StudentEncoder, signal, params: dict | None = None) -> Tensor:
    """Conv front end plus feature projection: ``signal[L] -> [l, d_model]``."""
    p = _params_for(enc, params)
    x = signal if isinstance(signal, Tensor) else Tensor._wrap(np.asarray(signal, dtype=np.float64))
    if x.ndim != 1:
        raise ConfigError(f"signal must be one-dimensional, got shape {x.shape}")
    x = reshape(x, (1, x.shape[0]))
    for i, (c, k, stride) in enumerate(enc.config.conv_layers):
        if x.shape[1] < k:
            raise InputTooShortError(
                f"conv layer {i}: input length {x.shape[1]} is shorter than kernel {k}"
            )
        x = gelu(conv1d(x, p[f"conv.{i}.weight"], stride) + reshape(p[f"conv.{i}.bias"], (c, 1)))
    x = transpose(x)
    return x @ p["feat_proj.weight"] + p["feat_proj.bias"]


def _attention(x, p, prefix, n_heads):
    l, d = x.shape
    dh = d // n_heads

    def heads(t):
        return transpose(reshape(t, (l, n_heads, dh)), (1, 0, 2))

    q = heads(x @ p[prefix + "wq"] + p[prefix + "bq"])
    k = heads(x @ p[prefix + "wk"])
    v = heads(x @ p[prefix + "wv"] + p[prefix + "bv"])
    scores = (q @ transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    out = softmax(scores) @ v
    out = reshape(transpose(out, (1, 0, 2)), (l, d))
    return out @ p[prefix + "wo"] + p[prefix + "bo"]


def encode_sequence(enc: StudentEncoder, signal, params: dict | None = None) -> EncodedSequence:
    """Per-step hidden vectors ``[l, d_embed]`` for one signal."""
    cfg = enc.config
    p = _params_for(enc, params)
    h = extract_features(enc, signal, p)
    l = h.shape[0]
    if l > cfg.max_positions:
        raise SequenceTooLongError(f"{l} encoded steps exceed max_positions={cfg.max_positions}")
    h = h + Tensor._wrap(enc._positions[:l])
    for b in range(cfg.n_layers):
        pre = f"blocks.{b}."
        a = layer_norm(h, p[pre + "ln1.gain"], p[pre + "ln1.bias"], LN_EPS)
        h = h + _attention(a, p, pre + "attn.", cfg.n_heads)
        f = layer_norm(h, p[pre + "ln2.gain"], p[pre + "ln2.bias"], LN_EPS)
        f = gelu(f @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]) @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
        h = h + f
    h = layer_norm(h, p["final_ln.gain"], p["final_ln.bias"], LN_EPS)
    if "out_proj.weight" in p:
        h = h @ p["out_proj.weight"] + p["out_proj.bias"]
    if not np.all(np.isfinite(h.data)):
        raise NumericError("encoder produced non-finite hidden states")
    return EncodedSequence(h)


def pool_utterance(seq: EncodedSequence) -> Tensor:
    """Mean of the per-step vectors over time."""
    return reduce_mean(seq.hidden, axis=0)


def embed_signal(enc: StudentEncoder, signal, params: dict | None = None) -> Tensor:
    return pool_utterance(encode_sequence(enc, signal, params))


# teachers

class SyntheticTeacher:
    """Unit-normalised sum of fixed per-token random vectors."""

    variant = "synthetic"

    def __init__(self, seed: int, vocab_size: int, d_embed: int):
        if vocab_size < 1 or d_embed < 1:
            raise ConfigError("vocab_size and d_embed must be positive")
        self.seed = int(seed)
        self.vocab_size = int(vocab_size)
        self.d_embed = int(d_embed)
        table = SeededRng(self.seed, 0x7EAC).normal(size=(self.vocab_size, self.d_embed))
        table.flags.writeable = False
        self._table = table

    def embed(self, tokens) -> np.ndarray:
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise MissingTargetError("empty token sequence has no embedding")
        bad = [t for t in tokens if not 0 <= t < self.vocab_size]
        if bad:
            raise MissingTargetError(f"tokens {bad} outside vocabulary of size {self.vocab_size}")
        v = self._table[tokens].sum(axis=0)
        return v / np.linalg.norm(v)

    def key_for(self, example):
        return example.tokens

    def state_bytes(self) -> bytes:
        head = json.dumps({"variant": self.variant, "seed": self.seed, "vocab_size": self.vocab_size,
                           "d_embed": self.d_embed}, sort_keys=True).encode()
        return head + self._table.tobytes()


class FileTeacher:
    """Embeddings looked up by example id, as stored in a dataset file."""

    variant = "file"

    def __init__(self, table: dict):
        if not table:
            raise ConfigError("teacher table is empty")
        widths = {np.shape(v) for v in table.values()}
        if len(widths) != 1 or len(next(iter(widths))) != 1:
            raise ConfigError("teacher embeddings must all be vectors of one width")
        self._table = {}
        for key, vec in table.items():
            arr = np.array(vec, dtype=np.float64)
            arr.flags.writeable = False
            self._table[str(key)] = arr
        self.d_embed = next(iter(widths))[0]

    @classmethod
    def from_dataset(cls, examples) -> "FileTeacher":
        return cls({ex.id: ex.target for ex in examples})

    @classmethod
    def load(cls, path) -> "FileTeacher":
        from .data import load_paired_dataset

        return cls.from_dataset(load_paired_dataset(path))

    def embed(self, key) -> np.ndarray:
        try:
            return self._table[str(key)]
        except KeyError:
            raise MissingTargetError(f"no teacher embedding for id {key!r}") from None

    def key_for(self, example):
        return example.id

    def state_bytes(self) -> bytes:
        return b"".join(k.encode() + b"\0" + self._table[k].tobytes() for k in sorted(self._table))


def teacher_embed(teacher, key) -> np.ndarray:
    return teacher.embed(key)
