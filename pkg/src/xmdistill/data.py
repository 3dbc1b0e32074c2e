"""Paired signal/target examples: synthetic generation, file container, batching.

Dataset container (``.xmdd``)::

    {"magic": "XMDD", "version": 1, "count": N}\n        header line
    {"id": ..., "label": ..., "tokens": [...], "sample_rate": 16000,
     "signal": [offset, n], "target": [offset, n]}\n      N index lines
    b"XMDD" <u32 version>                                binary head
    <little-endian float64 payloads>

Index offsets are byte offsets into the payload, counted from the end of the
binary head.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_bytes
from .errors import ConfigError, ContractError, DataError, ParseError, UnsupportedFormatError
from .model import SyntheticTeacher
from .numerics import SeededRng

MAGIC = b"XMDD"
VERSION = 1
CANONICAL_RATE = 16000
LABEL_RULES = ("classification", "regression")


@dataclass(eq=False)
class PairedExample:
    id: str
    signal: np.ndarray
    target: np.ndarray
    label: object = None
    tokens: tuple | None = None
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.signal.ndim != 1 or self.signal.size < 1:
            raise DataError(f"example {self.id!r}: signal must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.signal)) or not np.all(np.isfinite(self.target)):
            raise DataError(f"example {self.id!r}: non-finite values")
        if self.tokens is not None:
            self.tokens = tuple(int(t) for t in self.tokens)
        if isinstance(self.label, list):
            self.label = tuple(self.label)

    def __eq__(self, other):
        if not isinstance(other, PairedExample):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.tokens == other.tokens
            and self.sample_rate == other.sample_rate
            and np.array_equal(self.signal, other.signal)
            and np.array_equal(self.target, other.target)
        )

    __hash__ = None


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    vocab_size: int = 16
    d_embed: int = 64
    segment_len: int = 64
    base_freq: float = 500.0
    freq_step: float = 250.0
    noise_std: float = 0.05
    label_rule: str = "classification"
    n_classes: int = 7
    min_tokens: int = 3
    max_tokens: int = 12

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size: must be at least 2")
        if self.segment_len < 8:
            raise ConfigError("segment_len: must be at least 8")
        if self.noise_std < 0:
            raise ConfigError("noise_std: must be non-negative")
        if self.label_rule not in LABEL_RULES:
            raise ConfigError(f"label_rule: expected one of {LABEL_RULES}, got {self.label_rule!r}")
        if self.n_classes < 2:
            raise ConfigError("n_classes: must be at least 2")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError("min_tokens/max_tokens: need 1 <= min_tokens <= max_tokens")
        if self.d_embed < 1:
            raise ConfigError("d_embed: must be positive")
        top = (self.base_freq + (self.vocab_size - 1) * self.freq_step) * 1.7
        if self.base_freq <= 0 or self.freq_step <= 0 or top >= CANONICAL_RATE / 2:
            raise ConfigError("base_freq/freq_step: token frequencies must be positive and below Nyquist")

    def teacher(self) -> SyntheticTeacher:
        return SyntheticTeacher(self.seed, self.vocab_size, self.d_embed)


def token_segment(spec: SyntheticSpec, token: int) -> np.ndarray:
    n = np.arange(spec.segment_len)
    f1 = spec.base_freq + token * spec.freq_step
    w = 2.0 * math.pi / CANONICAL_RATE
    return 0.5 * np.sin(w * f1 * n) + 0.5 * np.sin(w * 1.7 * f1 * n)


def label_for_tokens(spec: SyntheticSpec, tokens):
    if spec.label_rule == "classification":
        return int(tokens[0]) % spec.n_classes
    return float(6.0 * np.mean(tokens) / (spec.vocab_size - 1) - 3.0)


def generate_synthetic_example(spec: SyntheticSpec, rng: SeededRng, example_id: str = "syn-0",
                               teacher: SyntheticTeacher | None = None) -> PairedExample:
    teacher = teacher or spec.teacher()
    count = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    tokens = [int(t) for t in rng.integers(0, spec.vocab_size, size=count)]
    signal = np.concatenate([token_segment(spec, t) for t in tokens])
    if spec.noise_std > 0:
        signal = signal + rng.normal(0.0, spec.noise_std, size=signal.size)
    return PairedExample(
        id=example_id,
        signal=signal,
        target=teacher.embed(tokens),
        label=label_for_tokens(spec, tokens),
        tokens=tuple(tokens),
    )


def generate_dataset(spec: SyntheticSpec, n: int, start: int = 0) -> list:
    """Examples ``start .. start+n-1``; each draws from its own child stream."""
    teacher = spec.teacher()
    base = SeededRng(spec.seed, 0xDA7A)
    return [
        generate_synthetic_example(spec, base.child(i), f"syn-{i:06d}", teacher)
        for i in range(start, start + n)
    ]


def _label_to_json(label):
    if label is None or isinstance(label, (int, float, str)):
        return label
    if isinstance(label, (tuple, list)):
        return [int(v) for v in label]
    if isinstance(label, np.integer):
        return int(label)
    if isinstance(label, np.floating):
        return float(label)
    raise DataError(f"unsupported label type {type(label).__name__}")


def dump_paired_dataset(examples) -> bytes:
    index = []
    payload = bytearray()
    for ex in examples:
        entry = {"id": ex.id, "label": _label_to_json(ex.label),
                 "tokens": list(ex.tokens) if ex.tokens is not None else None,
                 "sample_rate": int(ex.sample_rate)}
        for key, arr in (("signal", ex.signal), ("target", ex.target)):
            entry[key] = [len(payload), int(arr.size)]
            payload += arr.astype("<f8").tobytes()
        index.append(json.dumps(entry, sort_keys=True, separators=(",", ":")))
    header = json.dumps({"count": len(index), "magic": MAGIC.decode(), "version": VERSION},
                        sort_keys=True, separators=(",", ":"))
    text = "\n".join([header, *index]) + "\n"
    return text.encode() + MAGIC + struct.pack("<I", VERSION) + bytes(payload)


def write_paired_dataset(path, examples):
    atomic_write_bytes(path, dump_paired_dataset(examples))


def parse_paired_dataset(blob: bytes) -> list:
    pos = 0

    def next_line(what):
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise ParseError(f"truncated {what} at byte offset {pos}")
        line, start, pos = blob[pos:end], pos, end + 1
        try:
            return json.loads(line), start
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ParseError(f"malformed {what} at byte offset {start}: {e}") from None

    header, _ = next_line("header")
    if not isinstance(header, dict) or header.get("magic") != MAGIC.decode():
        raise ParseError("not an XMDD dataset: bad header magic at byte offset 0")
    if header.get("version") != VERSION:
        raise ParseError(f"unsupported XMDD version {header.get('version')!r}")
    count = header.get("count")
    if not isinstance(count, int) or count < 0:
        raise ParseError("header field 'count' must be a non-negative integer")

    entries = []
    for i in range(count):
        entry, at = next_line(f"index record {i}")
        if not isinstance(entry, dict) or not {"id", "signal", "target"} <= set(entry):
            raise ParseError(f"index record {i} at byte offset {at} lacks id/signal/target")
        entries.append(entry)

    head_at = pos
    if blob[pos:pos + 4] != MAGIC:
        raise ParseError(f"missing binary section magic at byte offset {head_at}")
    if len(blob) < pos + 8:
        raise ParseError(f"truncated binary head at byte offset {len(blob)}")
    (version,) = struct.unpack_from("<I", blob, pos + 4)
    if version != VERSION:
        raise ParseError(f"unsupported binary section version {version} at byte offset {head_at + 4}")
    payload_at = pos + 8

    examples = []
    for i, entry in enumerate(entries):
        arrays = {}
        for key in ("signal", "target"):
            try:
                offset, n = (int(v) for v in entry[key])
            except (TypeError, ValueError):
                raise ParseError(f"record {i}: bad {key} extent {entry[key]!r}") from None
            start = payload_at + offset
            stop = start + 8 * n
            if offset < 0 or n < 0:
                raise ParseError(f"record {i}: negative {key} extent")
            if stop > len(blob):
                raise ParseError(
                    f"record {i}: {key} payload truncated at byte offset {len(blob)} (needs bytes {start}..{stop})"
                )
            arrays[key] = np.frombuffer(blob, dtype="<f8", count=n, offset=start).astype(np.float64)
        try:
            examples.append(PairedExample(
                id=str(entry["id"]), signal=arrays["signal"], target=arrays["target"],
                label=entry.get("label"), tokens=entry.get("tokens"),
                sample_rate=int(entry.get("sample_rate", CANONICAL_RATE)),
            ))
        except DataError as e:
            raise ParseError(f"record {i}: {e}") from None
    widths = {ex.target.size for ex in examples}
    if len(widths) > 1:
        raise ParseError(f"inconsistent target widths {sorted(widths)}")
    return examples


def load_paired_dataset(path) -> list:
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_paired_dataset(blob)


def to_canonical(signal, sample_rate: int, channels: int = 1) -> np.ndarray:
    """Average ``[channels, L]`` input to mono and clamp to [-1, 1].

    Only 16 kHz input is accepted; resampling is not performed.
    """
    if sample_rate != CANONICAL_RATE:
        raise UnsupportedFormatError(f"sample rate {sample_rate} Hz unsupported; expected {CANONICAL_RATE} Hz")
    x = np.asarray(signal, dtype=np.float64)
    if channels == 1 and x.ndim == 1:
        mono = x
    elif x.ndim == 2 and x.shape[0] == channels:
        mono = x.mean(axis=0)
    else:
        raise UnsupportedFormatError(f"signal shape {x.shape} does not match {channels} channel(s)")
    if mono.size < 1 or not np.all(np.isfinite(mono)):
        raise DataError("signal must be non-empty and finite")
    return np.clip(mono, -1.0, 1.0)


@dataclass
class Batch:
    examples: list
    lengths: list = field(default_factory=list)

    def __post_init__(self):
        if not self.examples:
            raise ContractError("empty batch")
        self.lengths = [ex.signal.size for ex in self.examples]

    def __len__(self):
        return len(self.examples)


def iterate_batches(dataset, batch_size: int, seed: int, epoch: int, drop_last: bool = False) -> list:
    """Seeded shuffle for ``(seed, epoch)`` cut into batches."""
    if batch_size < 1:
        raise ConfigError("batch_size: must be positive")
    n = len(dataset)
    if n == 0:
        raise ConfigError("dataset is empty")
    order = SeededRng(seed, 0xBA7C, epoch).permutation(n)
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < batch_size and drop_last:
            break
        batches.append(Batch([dataset[i] for i in idx]))
    return batches


def split_dataset(dataset, seed: int, ratios=(0.6, 0.2, 0.2)):
    """Seeded train/dev/test split."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ConfigError("split ratios must be three non-negative numbers summing to 1")
    n = len(dataset)
    order = SeededRng(seed, 0x5917).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_dev = int(round(ratios[1] * n))
    pick = lambda ids: [dataset[i] for i in ids]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train:n_train + n_dev]), pick(order[n_train + n_dev:])
