"""Ensemble fixture: a pretrained base plus fully fine-tuned task variants.

The base model is trained on a source task and then treated as frozen.  Each
ensemble member is a copy of the base fine-tuned (all blocks) on one task from
the pool.  Every trained model is cached on disk under a key derived from
everything that determines it, so sweeps reuse the same fixture.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import checkpoint_to_model, model_to_checkpoint, read_checkpoint, write_checkpoint
from .extraction import Ensemble, StackedAttentionWeights
from .model import BASE_BLOCKS, ModelDims, ToyTransformer, init_model
from .tasks import TaskSpec, generate
from .train import fit

log = logging.getLogger(__name__)

CACHE_ENV = "CORA_LAB_CACHE"
DEFAULT_POOL = ("copy", "reverse", "modular_add", "sort_tokens", "copy_offset")


class FixtureError(RuntimeError):
    pass


@dataclass(frozen=True)
class FixtureConfig:
    dims: ModelDims = field(default_factory=ModelDims)
    source_task: str = "reverse"
    pool: tuple[str, ...] = DEFAULT_POOL
    mode: str = "mixed"  # "mixed": one task per member; "same": every member on same_task
    same_task: str = "copy"
    pretrain_steps: int = 1000
    finetune_steps: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3
    task_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("mixed", "same"):
            raise FixtureError(f"unknown fixture mode {self.mode!r}")
        if not self.pool:
            raise FixtureError("the task pool is empty")
        for kind in {self.source_task, self.same_task, *self.pool}:
            need = TaskSpec(kind=kind, vocab_size=self.dims.vocab_size).lm_len
            if need > self.dims.seq_len:
                raise FixtureError(f"task {kind!r} needs seq_len >= {need}, dims have {self.dims.seq_len}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool"] = list(self.pool)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FixtureConfig":
        d = dict(d)
        if "dims" in d:
            d["dims"] = ModelDims(**d["dims"])
        if "pool" in d:
            d["pool"] = tuple(d["pool"])
        return cls(**d)


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "cora_lab"))


def _key(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def _task(cfg: FixtureConfig, kind: str) -> TaskSpec:
    return TaskSpec(kind=kind, vocab_size=cfg.dims.vocab_size, seed=cfg.task_seed)


def _train_full(model: ToyTransformer, spec: TaskSpec, steps: int, cfg: FixtureConfig, seed: int) -> ToyTransformer:
    train, evalset = generate(spec)
    rows = fit(model, BASE_BLOCKS, train, evalset, steps=steps, batch_size=cfg.batch_size,
               learning_rate=cfg.learning_rate, seed=seed, eval_every=max(steps, 1))
    log.info("trained %s for %d steps: eval loss %.4f, accuracy %.3f",
             spec.kind, steps, rows[-1]["eval_loss"], rows[-1]["eval_accuracy"])
    return model


def _cached(cache_dir: Path | None, payload: dict, label: str, build) -> ToyTransformer:
    if cache_dir is None:
        return build()
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{label}-{_key(payload)}.ck"
    if path.exists():
        return checkpoint_to_model(read_checkpoint(path))
    model = build()
    write_checkpoint(path, model_to_checkpoint(model, label=label, seed=payload.get("seed"),
                                               meta={"fixture": payload}))
    return model


def pretrained_base(base_seed: int = 0, cfg: FixtureConfig | None = None, cache_dir=None) -> ToyTransformer:
    cfg = cfg or FixtureConfig()
    payload = {"role": "base", "seed": base_seed, "dims": asdict(cfg.dims), "task": cfg.source_task,
               "task_seed": cfg.task_seed, "steps": cfg.pretrain_steps, "batch": cfg.batch_size,
               "lr": cfg.learning_rate}

    def build():
        model = init_model(cfg.dims, seed=base_seed)
        return _train_full(model, _task(cfg, cfg.source_task), cfg.pretrain_steps, cfg, seed=base_seed)

    return _cached(cache_dir, payload, "base", build)


def member_tasks(cfg: FixtureConfig) -> list[tuple[str, str]]:
    """(label, task kind) for every member of the full pool."""
    if cfg.mode == "same":
        return [(f"{cfg.same_task}-{i}", cfg.same_task) for i in range(len(cfg.pool))]
    return [(kind, kind) for kind in cfg.pool]


def select_members(n: int, base_seed: int, cfg: FixtureConfig) -> list[tuple[str, str]]:
    """Seeded random subset of size ``n`` from the member pool, in pool order."""
    pool = member_tasks(cfg)
    if not 1 <= n <= len(pool):
        raise FixtureError(f"ensemble size must be between 1 and {len(pool)}, got {n}")
    if n == len(pool):
        return pool
    rng = np.random.default_rng([base_seed, n, 11])
    picked = sorted(rng.choice(len(pool), size=n, replace=False))
    return [pool[i] for i in picked]


def fine_tuned_member(label: str, kind: str, base_seed: int, cfg: FixtureConfig, cache_dir=None,
                      base: ToyTransformer | None = None) -> ToyTransformer:
    index = [lbl for lbl, _ in member_tasks(cfg)].index(label)
    seed = base_seed * 1000 + index + 1
    payload = {"role": "member", "label": label, "task": kind, "seed": seed, "base_seed": base_seed,
               "fixture": cfg.to_dict()}

    def build():
        start = base if base is not None else pretrained_base(base_seed, cfg, cache_dir)
        return _train_full(start.copy(), _task(cfg, kind), cfg.finetune_steps, cfg, seed=seed)

    return _cached(cache_dir, payload, f"member-{label}", build)


def build_ensemble_models(n: int = 5, base_seed: int = 0, cfg: FixtureConfig | None = None,
                          cache_dir=None) -> tuple[ToyTransformer, dict[str, ToyTransformer]]:
    cfg = cfg or FixtureConfig()
    base = pretrained_base(base_seed, cfg, cache_dir)
    members = {
        label: fine_tuned_member(label, kind, base_seed, cfg, cache_dir, base=base)
        for label, kind in select_members(n, base_seed, cfg)
    }
    return base, members


def build_ensemble_fixture(n: int = 5, base_seed: int = 0, cfg: FixtureConfig | None = None,
                           cache_dir=None) -> Ensemble:
    """Ensemble of the stacked attention weights of ``n`` fine-tuned members."""
    _, members = build_ensemble_models(n, base_seed, cfg, cache_dir)
    return Ensemble(
        members=[StackedAttentionWeights.from_stacked(m.w_qkv) for m in members.values()],
        source_labels=list(members),
    )


def write_ensemble_dir(out_dir, n: int = 5, base_seed: int = 0, cfg: FixtureConfig | None = None,
                       cache_dir=None) -> Path:
    """Materialise base.ck and one member-<label>.ck per member into ``out_dir``."""
    cfg = cfg or FixtureConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base, members = build_ensemble_models(n, base_seed, cfg, cache_dir)
    meta = {"fixture": cfg.to_dict(), "base_seed": base_seed}
    write_checkpoint(out_dir / "base.ck", model_to_checkpoint(base, label="base", seed=base_seed,
                                                              meta={**meta, "role": "base"}))
    for label, model in members.items():
        write_checkpoint(out_dir / f"member-{label}.ck",
                         model_to_checkpoint(model, label=label, seed=base_seed, meta={**meta, "role": "member"}))
    return out_dir


def read_ensemble_dir(path) -> tuple[Ensemble, ToyTransformer | None]:
    """Ensemble from every member checkpoint in ``path``, plus the base model if present."""
    path = Path(path)
    files = sorted(path.glob("*.ck"))
    if not files:
        raise FixtureError(f"no checkpoints found in {path}")
    members, labels, base = [], [], None
    for f in files:
        ck = read_checkpoint(f)
        role = ck.meta.get("role")
        if role == "base":
            base = checkpoint_to_model(ck)
            continue
        if ck.kind == "model":
            members.append(StackedAttentionWeights.from_stacked(ck.blocks["w_qkv"]))
        elif ck.kind == "stacked":
            members.append(StackedAttentionWeights(ck.blocks["w_q"], ck.blocks["w_k"], ck.blocks["w_v"]))
        else:
            continue
        labels.append(ck.label or f.stem)
    if not members:
        raise FixtureError(f"no ensemble members found in {path}")
    return Ensemble(members, labels), base


def with_dims(cfg: FixtureConfig, **dims) -> FixtureConfig:
    return replace(cfg, dims=replace(cfg.dims, **dims))
