"""Synthetic sequence tasks.

Every sample is an (input, target) pair of symbol sequences.  Symbols are the
tokens ``0 .. vocab_size-2``; token ``vocab_size-1`` is the separator.  For
the causal model a sample becomes ``input SEP target[:-1]`` with the loss
placed on the target positions only.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .model import IGNORE

TASK_KINDS = ("copy", "reverse", "modular_add", "sort_tokens", "copy_offset")


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 16
    seq_len: int = 6
    seed: int = 0
    train_size: int = 2048
    eval_size: int = 256
    modulus: int | None = None  # modular_add only; defaults to the symbol count
    offset: int = 1  # copy_offset only

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise TaskError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.seq_len < 1 or self.train_size < 1 or self.eval_size < 1:
            raise TaskError("seq_len, train_size and eval_size must be positive")
        need = self.min_vocab()
        if self.vocab_size < need:
            raise TaskError(f"task {self.kind!r} needs vocab_size >= {need}, got {self.vocab_size}")

    @property
    def n_symbols(self) -> int:
        return self.vocab_size - 1

    @property
    def sep(self) -> int:
        return self.vocab_size - 1

    @property
    def mod(self) -> int:
        return self.modulus if self.modulus is not None else self.n_symbols

    def min_vocab(self) -> int:
        if self.kind == "modular_add":
            # operand and result symbols 0..m-1, plus the separator
            return (self.modulus if self.modulus is not None else 2) + 1
        return 3

    @property
    def input_len(self) -> int:
        return 2 if self.kind == "modular_add" else self.seq_len

    @property
    def target_len(self) -> int:
        return 1 if self.kind == "modular_add" else self.seq_len

    @property
    def lm_len(self) -> int:
        """Length of the model-side token sequence."""
        return self.input_len + self.target_len


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, input_len)
    targets: np.ndarray  # (N, target_len)
    sep: int

    def __len__(self):
        return self.inputs.shape[0]

    def lm_batch(self, idx=None) -> tuple[np.ndarray, np.ndarray]:
        """Tokens and labels for the causal model (labels IGNORE on the prompt)."""
        x = self.inputs if idx is None else self.inputs[idx]
        y = self.targets if idx is None else self.targets[idx]
        n, li = x.shape
        sep = np.full((n, 1), self.sep, dtype=x.dtype)
        tokens = np.concatenate([x, sep, y[:, :-1]], axis=1)
        labels = np.concatenate([np.full((n, li), IGNORE, dtype=x.dtype), y], axis=1)
        return tokens, labels


def target_for(spec: TaskSpec, inp) -> np.ndarray:
    """The task's target for one input sequence."""
    x = np.asarray(inp, dtype=np.int64)
    if spec.kind == "copy":
        return x.copy()
    if spec.kind == "reverse":
        return x[::-1].copy()
    if spec.kind == "sort_tokens":
        return np.sort(x)
    if spec.kind == "copy_offset":
        return (x + spec.offset) % spec.n_symbols
    a, b = x
    return np.array([(a + b) % spec.mod], dtype=np.int64)


def _alphabet(spec: TaskSpec) -> int:
    return spec.mod if spec.kind == "modular_add" else spec.n_symbols


def _distinct_inputs(spec: TaskSpec, count: int, rng) -> np.ndarray:
    k, length = _alphabet(spec), spec.input_len
    space = k**length
    if space <= 4 * count:
        allx = np.array(list(itertools.product(range(k), repeat=length)), dtype=np.int64)
        return allx[rng.permutation(space)][: min(count, space)]
    seen: set[tuple] = set()
    rows = []
    while len(rows) < count:
        for row in rng.integers(0, k, size=(count, length)):
            key = tuple(row)
            if key not in seen:
                seen.add(key)
                rows.append(row)
                if len(rows) == count:
                    break
    return np.array(rows, dtype=np.int64)


def generate(spec: TaskSpec) -> tuple[Dataset, Dataset]:
    """Deterministic, disjoint train and eval sets.

    When the input space is smaller than train_size + eval_size, the eval set
    shrinks to at most half of the available inputs.
    """
    rng = np.random.default_rng([spec.seed, TASK_KINDS.index(spec.kind)])
    pool = _distinct_inputs(spec, spec.train_size + spec.eval_size, rng)
    n_eval = min(spec.eval_size, len(pool) // 2) if len(pool) < spec.train_size + spec.eval_size else spec.eval_size
    if n_eval < 1:
        raise TaskError(f"input space of task {spec.kind!r} is too small to split")
    ev, tr = pool[:n_eval], pool[n_eval : n_eval + spec.train_size]

    def build(xs):
        ys = np.stack([target_for(spec, x) for x in xs])
        return Dataset(xs, ys, spec.sep)

    return build(tr), build(ev)
