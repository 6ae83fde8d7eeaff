"""Low-rank adapter over a stacked [W_Q; W_K; W_V] block.

The adapted weight is ``W = W0 + scale * A @ B`` with A of shape
(3*d_model, r) and B of shape (r, d_k).  One adapter covers the whole stacked
block.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .extraction import CommonBasis, StackedAttentionWeights
from .linalg import as_matrix

INIT_MODES = ("lora_zero_b", "cora_common_basis", "ablate_zeros", "ablate_ones", "ablate_random")


class AdapterError(ValueError):
    pass


@dataclass
class Adapter:
    a: np.ndarray
    b: np.ndarray
    rank: int
    scale: float = 1.0
    b_frozen: bool = False
    init_mode: str = "lora_zero_b"
    seed: int = 0

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise AdapterError(f"unknown init mode {self.init_mode!r}")
        if self.a.shape[1] != self.rank or self.b.shape[0] != self.rank:
            raise AdapterError(
                f"rank {self.rank} inconsistent with A{self.a.shape} and B{self.b.shape}"
            )
        if self.scale < 0:
            raise AdapterError("scale must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of the stacked weight this adapter updates."""
        return (self.a.shape[0], self.b.shape[1])

    def delta(self) -> np.ndarray:
        return self.scale * (self.a @ self.b)

    def copy(self) -> "Adapter":
        return replace(self, a=self.a.copy(), b=self.b.copy())

    def descriptor(self) -> dict:
        return {
            "init_mode": self.init_mode,
            "rank": self.rank,
            "scale": self.scale,
            "b_frozen": self.b_frozen,
            "seed": self.seed,
        }


@dataclass
class AdaptedWeights:
    base: StackedAttentionWeights
    adapter: Adapter

    def __post_init__(self):
        if self.base.stacked.shape != self.adapter.shape:
            raise AdapterError(
                f"base stacked shape {self.base.stacked.shape} does not match adapter {self.adapter.shape}"
            )


@dataclass(frozen=True)
class ParameterCount:
    a_params: int
    b_params: int
    trainable: int
    total: int

    @property
    def b_fraction(self) -> float:
        """True share of B in the adapter (0.5 only when 3*d_model == d_k)."""
        return self.b_params / self.total


def init_adapter(mode, shape, r, seed, basis: CommonBasis | None = None, *,
                 scale: float = 1.0, b_frozen: bool = False, a_std: float | None = None) -> Adapter:
    """Build an adapter for a stacked weight of ``shape`` = (3*d_model, d_k).

    A is drawn from N(0, 1/r).  B depends on ``mode``: zeros for LoRA and the
    zero ablation, the extracted basis for CoRA, ones, or N(0, 1/d_k).
    """
    if mode not in INIT_MODES:
        raise AdapterError(f"unknown init mode {mode!r}; expected one of {INIT_MODES}")
    rows, d_k = shape
    if not 1 <= r <= min(rows, d_k):
        raise AdapterError(f"rank {r} out of range for stacked shape {shape}")
    if (mode == "cora_common_basis") != (basis is not None):
        raise AdapterError("a common basis is required for, and only for, cora_common_basis")

    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.0 / np.sqrt(r) if a_std is None else a_std, size=(rows, r))
    if mode in ("lora_zero_b", "ablate_zeros"):
        b = np.zeros((r, d_k))
    elif mode == "ablate_ones":
        b = np.ones((r, d_k))
    elif mode == "ablate_random":
        b = rng.normal(0.0, 1.0 / np.sqrt(d_k), size=(r, d_k))
    else:
        if basis.rank != r or basis.b.shape != (r, d_k):
            raise AdapterError(
                f"basis of rank {basis.rank} and shape {basis.b.shape} does not fit rank {r}, d_k {d_k}"
            )
        if basis.method != "svd":
            raise AdapterError("only SVD bases may initialise an adapter")
        b = as_matrix(basis.b).copy()
    return Adapter(a=a, b=b, rank=int(r), scale=float(scale), b_frozen=bool(b_frozen),
                   init_mode=mode, seed=int(seed))


def effective_weight(aw: AdaptedWeights) -> np.ndarray:
    return aw.base.stacked + aw.adapter.delta()


def merge_adapter(aw: AdaptedWeights) -> StackedAttentionWeights:
    """Fold the adapter update into the base weights."""
    return StackedAttentionWeights.from_stacked(effective_weight(aw))


def trainable_parameter_count(adapter: Adapter) -> ParameterCount:
    rows, d_k = adapter.shape
    a_params = rows * adapter.rank
    b_params = adapter.rank * d_k
    trainable = a_params if adapter.b_frozen else a_params + b_params
    return ParameterCount(a_params, b_params, trainable, a_params + b_params)
