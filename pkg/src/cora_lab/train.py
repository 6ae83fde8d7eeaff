"""Seeded adapter training: LoRA, CoRA (frozen / trainable B) and the B ablations."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .adapter import init_adapter, trainable_parameter_count
from .extraction import CommonBasis
from .model import BASE_BLOCKS, ModelDims, ToyTransformer, backward, forward, init_model, loss_and_accuracy
from .optim import clip_by_global_norm, make_optimizer
from .tasks import Dataset, TaskSpec, generate

log = logging.getLogger(__name__)

# regime -> (adapter init mode, B frozen)
REGIMES = {
    "lora": ("lora_zero_b", False),
    "cora_fb": ("cora_common_basis", True),
    "cora_tb": ("cora_common_basis", False),
    "ablate_zeros_frozen": ("ablate_zeros", True),
    "ablate_ones_frozen": ("ablate_ones", True),
    "ablate_random_frozen": ("ablate_random", True),
}
ABLATION_REGIMES = ("lora", "cora_fb", "cora_tb", "ablate_zeros_frozen", "ablate_ones_frozen", "ablate_random_frozen")
DEFAULT_RANKS = (8, 16, 32)
COMPARISON_REGIMES = ("lora", "cora_fb", "cora_tb")

METRICS_HEADER = ("rank", "regime", "seed", "step", "train_loss", "eval_loss", "eval_accuracy", "trainable_params")
SWEEP_HEADER = (
    "rank", "regime", "seed", "status", "best_eval_loss", "final_eval_loss",
    "final_eval_accuracy", "final_train_loss", "trainable_params", "wall_steps",
)
SUMMARY_HEADER = (
    "rank", "regime", "n", "mean_final_eval_loss", "min_final_eval_loss",
    "max_final_eval_loss", "mean_final_eval_accuracy",
)

TRAIN_LOSS_SUBSET = 256


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "lora"
    rank: int = 8
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    task: str = "copy"
    eval_every: int = 100
    scale: float = 1.0
    clip_norm: float | None = None
    a_init_std: float | None = None
    extra_trainable: tuple[str, ...] = ()

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise TrainingError(f"unknown regime {self.regime!r}; expected one of {tuple(REGIMES)}")
        # steps == 0 is allowed and yields only the initial evaluation row
        if self.steps < 0:
            raise TrainingError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be > 0")
        if self.batch_size < 1 or self.eval_every < 1:
            raise TrainingError("batch_size and eval_every must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")
        bad = set(self.extra_trainable) - set(BASE_BLOCKS)
        if bad:
            raise TrainingError(f"extra_trainable names unknown blocks {sorted(bad)}")

    @property
    def init_mode(self) -> str:
        return REGIMES[self.regime][0]

    @property
    def b_frozen(self) -> bool:
        return REGIMES[self.regime][1]


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    config: TrainConfig
    metrics: RunMetrics
    model: ToyTransformer


def fit(model: ToyTransformer, trainable, train: Dataset, evalset: Dataset, *, steps, batch_size,
        learning_rate, optimizer="adam", seed=0, eval_every=100, clip_norm=None, on_eval=None):
    """Train ``model`` in place; returns the list of evaluation rows.

    Rows are taken at step 0, every ``eval_every`` steps and at the last step.
    Batches are drawn with replacement from ``train`` using ``seed``.
    """
    opt = make_optimizer(optimizer, learning_rate)
    rng = np.random.default_rng([seed, 7])
    train_tok, train_lab = train.lm_batch(np.arange(min(len(train), TRAIN_LOSS_SUBSET)))
    eval_tok, eval_lab = evalset.lm_batch()
    params = model.parameters()
    rows = []

    def evaluate(step):
        tl, _ = loss_and_accuracy(model, train_tok, train_lab)
        el, ea = loss_and_accuracy(model, eval_tok, eval_lab)
        row = {"step": step, "train_loss": tl, "eval_loss": el, "eval_accuracy": ea}
        rows.append(row)
        if on_eval is not None:
            on_eval(row)

    evaluate(0)
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(train), size=batch_size)
        tok, lab = train.lm_batch(idx)
        _, cache = forward(model, tok)
        loss, grads = backward(model, cache, lab, trainable)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        if clip_norm is not None:
            grads = clip_by_global_norm(grads, clip_norm)
        opt.step(params, grads)
        if step % eval_every == 0 or step == steps:
            evaluate(step)
            if not np.isfinite(rows[-1]["eval_loss"]):
                raise TrainingDivergedError(step, rows[-1]["eval_loss"])
    return rows


def task_spec_for(cfg: TrainConfig, dims: ModelDims, task: TaskSpec | None = None) -> TaskSpec:
    if task is not None:
        return task
    return TaskSpec(kind=cfg.task, vocab_size=dims.vocab_size)


def run_training(cfg: TrainConfig, basis: CommonBasis | None = None, *, base: ToyTransformer | None = None,
                 task: TaskSpec | None = None) -> TrainResult:
    """Attach an adapter to a copy of ``base`` according to ``cfg`` and train it.

    ``base`` is the frozen pretrained model; when omitted a freshly initialised
    model with default dimensions is used.  The result is fully determined by
    (cfg, basis, base, task).
    """
    mode, frozen = REGIMES[cfg.regime]
    if mode == "cora_common_basis" and basis is None:
        raise TrainingError(f"regime {cfg.regime!r} requires a common basis")
    if base is None:
        base = init_model(ModelDims(), seed=cfg.seed)
    spec = task_spec_for(cfg, base.dims, task)
    if spec.vocab_size != base.dims.vocab_size:
        raise TrainingError("task vocabulary does not match the model")
    if spec.lm_len > base.dims.seq_len:
        raise TrainingError(f"task sequences ({spec.lm_len}) exceed model seq_len {base.dims.seq_len}")

    adapter = init_adapter(
        mode, base.w_qkv.shape, cfg.rank, cfg.seed,
        basis if mode == "cora_common_basis" else None, scale=cfg.scale, b_frozen=frozen, a_std=cfg.a_init_std,
    )
    model = base.with_adapter(adapter)
    trainable = ("adapter_a",) + (() if frozen else ("adapter_b",)) + tuple(cfg.extra_trainable)
    n_trainable = trainable_parameter_count(adapter).trainable + sum(
        model.parameters()[name].size for name in cfg.extra_trainable
    )
    train, evalset = generate(spec)
    rows = fit(
        model, trainable, train, evalset, steps=cfg.steps, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, optimizer=cfg.optimizer, seed=cfg.seed,
        eval_every=cfg.eval_every, clip_norm=cfg.clip_norm,
    )
    for row in rows:
        row.update(rank=cfg.rank, regime=cfg.regime, seed=cfg.seed, trainable_params=n_trainable)
    summary = {
        "best_eval_loss": min(r["eval_loss"] for r in rows),
        "final_eval_loss": rows[-1]["eval_loss"],
        "final_eval_accuracy": rows[-1]["eval_accuracy"],
        "final_train_loss": rows[-1]["train_loss"],
        "trainable_params": n_trainable,
        "wall_steps": cfg.steps,
    }
    return TrainResult(cfg, RunMetrics(rows, summary), model)


def _run_cell(args):
    cfg, basis, base, task = args
    try:
        result = run_training(cfg, basis, base=base, task=task)
    except Exception as exc:  # a failed cell must not abort the sweep
        log.warning("cell rank=%s regime=%s seed=%s failed: %s", cfg.rank, cfg.regime, cfg.seed, exc)
        return {"rank": cfg.rank, "regime": cfg.regime, "seed": cfg.seed, "status": f"failed: {exc}"}, []
    row = {"rank": cfg.rank, "regime": cfg.regime, "seed": cfg.seed, "status": "ok", **result.metrics.summary}
    return row, result.metrics.rows


def rank_sweep(template: TrainConfig, ranks, regimes, seeds, *, bases: dict | None = None,
               base: ToyTransformer | None = None, task: TaskSpec | None = None, jobs: int = 1):
    """Run the full (rank x regime x seed) grid.

    ``bases`` maps rank -> CommonBasis for the CoRA regimes.  Returns
    ``(table_rows, metric_rows)`` in grid order regardless of ``jobs``.
    """
    if not ranks or not regimes or not seeds:
        raise TrainingError("ranks, regimes and seeds must be non-empty")
    bases = bases or {}
    cells = []
    for r in ranks:
        for regime in regimes:
            for seed in seeds:
                cfg = replace(template, rank=int(r), regime=regime, seed=int(seed))
                basis = bases.get(int(r)) if REGIMES[regime][0] == "cora_common_basis" else None
                cells.append((cfg, basis, base, task))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    table = [row for row, _ in results]
    metrics = [m for _, rows in results for m in rows]
    return table, metrics


def summarize(table) -> list[dict]:
    """Mean/min/max of final eval loss per (rank, regime) and per regime over all ranks."""
    groups: dict[tuple, list[dict]] = {}
    overall: dict[tuple, list[dict]] = {}
    for row in table:
        if row.get("status") != "ok":
            continue
        groups.setdefault((row["rank"], row["regime"]), []).append(row)
        overall.setdefault(("all", row["regime"]), []).append(row)
    groups.update(overall)
    out = []
    for (rank, regime), rows in groups.items():
        losses = np.array([r["final_eval_loss"] for r in rows])
        accs = np.array([r["final_eval_accuracy"] for r in rows])
        out.append({
            "rank": rank, "regime": regime, "n": len(rows),
            "mean_final_eval_loss": float(losses.mean()),
            "min_final_eval_loss": float(losses.min()),
            "max_final_eval_loss": float(losses.max()),
            "mean_final_eval_accuracy": float(accs.mean()),
        })
    return out


def capacity_anomalies(table, low=8, high=32, slack=0.05) -> list[str]:
    """Cells where the larger rank trained worse than the smaller one by more than ``slack`` nats."""
    by_key = {(r["rank"], r["regime"], r["seed"]): r for r in table if r.get("status") == "ok"}
    notes = []
    for (rank, regime, seed), row in by_key.items():
        if rank != high or (low, regime, seed) not in by_key:
            continue
        lo = by_key[(low, regime, seed)]["final_train_loss"]
        if row["final_train_loss"] > lo + slack:
            notes.append(f"{regime} seed {seed}: train loss r={high} {row['final_train_loss']:.4f} > r={low} {lo:.4f} + {slack}")
    for n in notes:
        log.warning("capacity anomaly: %s", n)
    return notes


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["extra_trainable"] = list(cfg.extra_trainable)
    return d
