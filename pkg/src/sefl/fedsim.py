"""Round-driven federation simulator on a synthetic linear-regression task.

Each client holds a shard ``(X, Y)`` with ``Y = X @ W*.T + noise``; the
model is the matrix ``W`` (``output_dim x input_dim``) and the loss is half
the mean squared error. By default ``W*`` is drawn from the BHM image so
the compressed updates can reach the optimum.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import random
import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Protocol, Sequence

import numpy as np

from . import ahe, bhm, dp
from .protocol import ThresholdAbort, run_round, setup
from .transcript import RoundTranscript

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "round",
    "status",
    "survivors",
    "global_loss",
    "update_norm_pre_clip",
    "update_norm_post_clip",
    "clipped_fraction",
    "compression_error",
    "epsilon_total",
    "delta_total",
    "abort_reason",
)

SWEEP_COLUMNS = (
    "dropout_rate",
    "rounds_completed",
    "rounds_aborted",
    "mean_survivors",
    "initial_loss",
    "final_loss",
    "frequently_aborting",
)


@dataclass(frozen=True)
class SimConfig:
    num_clients: int = 10
    rounds: int = 10
    dropout_rate: float = 0.0
    threshold: int = 1
    input_dim: int = 4
    output_dim: int = 4
    samples_per_client: int | tuple[int, ...] = 50
    noise_std: float = 0.1
    learning_rate: float = 0.2
    local_steps: int = 5
    weight_structure: str = "bhm"
    epsilon: float = 1.0
    delta: float = 1e-5
    clip_bound: float = 1.0
    scaling_factor: float = 1.0
    sensitivity_divide_by_L: bool = False
    block_size: int = 2
    modulus_bits: int = 256
    frac_bits: int = 32
    slack_bits: int = 20
    max_magnitude: float = 2.0**10
    noise_mode: str = "combined_bits"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.samples_per_client, list):
            object.__setattr__(self, "samples_per_client", tuple(self.samples_per_client))
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not 1 <= self.threshold <= self.num_clients:
            raise ValueError(f"threshold must lie in [1, num_clients], got {self.threshold}")
        if self.weight_structure not in ("bhm", "dense"):
            raise ValueError("weight_structure must be 'bhm' or 'dense'")
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        sizes = self.client_sizes
        if len(sizes) != self.num_clients or min(sizes) < 1:
            raise ValueError("samples_per_client must give a positive size for every client")

    @property
    def model_dim(self) -> int:
        return self.input_dim * self.output_dim

    @property
    def model_shape(self) -> tuple[int, int]:
        return self.output_dim, self.input_dim

    @property
    def client_sizes(self) -> tuple[int, ...]:
        s = self.samples_per_client
        return tuple(s) if isinstance(s, tuple) else (int(s),) * self.num_clients

    @property
    def feasible(self) -> bool:
        return self.threshold <= self.num_clients * (1 - self.dropout_rate)

    def dp_params(self) -> dp.DpParams:
        return dp.DpParams(
            epsilon=self.epsilon,
            delta=self.delta,
            clip_bound=self.clip_bound,
            scaling_factor=self.scaling_factor,
            rounds_budgeted=self.rounds,
            divide_by_L=self.sensitivity_divide_by_L,
        )

    def bhm_params(self) -> bhm.BhmParams:
        return bhm.BhmParams(self.block_size, self.scaling_factor)

    def fixed_point(self) -> ahe.FixedPointParams:
        return ahe.FixedPointParams(self.frac_bits, self.max_magnitude, self.slack_bits)


def config_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(SimConfig))


# ---------------------------------------------------------------------------
# Data and model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Shard:
    X: np.ndarray  # (n, input_dim)
    Y: np.ndarray  # (n, output_dim)

    def __len__(self) -> int:
        return len(self.X)


@dataclass(frozen=True)
class Dataset:
    true_weights: np.ndarray
    shards: tuple[Shard, ...]

    def pooled(self) -> Shard:
        return Shard(np.vstack([s.X for s in self.shards]), np.vstack([s.Y for s in self.shards]))


def generate_data(config: SimConfig) -> Dataset:
    rng = np.random.default_rng([config.seed, 1])
    rows, cols = config.model_shape
    dense = rng.normal(size=(rows, cols))
    if config.weight_structure == "bhm":
        true_w = bhm.decompress(bhm.compress(dense, bhm.BhmParams(config.block_size)))
    else:
        true_w = dense
    shards = []
    for n_j in config.client_sizes:
        X = rng.normal(size=(n_j, cols))
        Y = X @ true_w.T + config.noise_std * rng.normal(size=(n_j, rows))
        shards.append(Shard(X, Y))
    return Dataset(true_w, tuple(shards))


class Trainer(Protocol):
    def local_update(self, weights: np.ndarray, shard: Shard) -> np.ndarray: ...


@dataclass
class ToyModel:
    """Linear model ``y = W x`` trained with full-batch gradient descent."""

    weights: np.ndarray
    learning_rate: float = 0.2
    local_steps: int = 5

    @staticmethod
    def loss_at(weights: np.ndarray, shard: Shard) -> float:
        r = shard.X @ weights.T - shard.Y
        return 0.5 * float(np.mean(np.sum(r * r, axis=1)))

    @staticmethod
    def gradient_at(weights: np.ndarray, shard: Shard) -> np.ndarray:
        r = shard.X @ weights.T - shard.Y
        return r.T @ shard.X / len(shard)

    def loss(self, shard: Shard) -> float:
        return self.loss_at(self.weights, shard)

    def gradient(self, shard: Shard) -> np.ndarray:
        return self.gradient_at(self.weights, shard)

    def local_update(self, weights: np.ndarray, shard: Shard) -> np.ndarray:
        w = np.array(weights, dtype=float)
        for _ in range(self.local_steps):
            w = w - self.learning_rate * self.gradient_at(w, shard)
        return w - weights


def local_train(model: ToyModel, shard: Shard) -> np.ndarray:
    """Weight delta after ``model.local_steps`` gradient steps on ``shard``."""
    if len(shard) == 0:
        raise ValueError("cannot train on an empty shard")
    return model.local_update(model.weights, shard)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


@dataclass
class RunMetrics:
    initial_loss: float
    rows: list[dict] = field(default_factory=list)
    final_weights: np.ndarray | None = None
    ledger: dp.PrivacyLedger = field(default_factory=dp.PrivacyLedger)
    transcripts: list[RoundTranscript] = field(default_factory=list, repr=False)
    public_key: ahe.PublicKey | None = field(default=None, repr=False)

    @property
    def completed(self) -> list[dict]:
        return [r for r in self.rows if r["status"] == "ok"]

    @property
    def aborted(self) -> list[dict]:
        return [r for r in self.rows if r["status"] == "aborted"]

    @property
    def final_loss(self) -> float:
        done = self.completed
        return done[-1]["global_loss"] if done else self.initial_loss

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def _initial_weights(config: SimConfig) -> np.ndarray:
    return np.zeros(config.model_shape)


def run_simulation(
    config: SimConfig,
    trainer: Trainer | None = None,
    keep_transcripts: bool = False,
) -> RunMetrics:
    """Run ``config.rounds`` rounds of the secure protocol.

    Each client drops out of each round independently with probability
    ``dropout_rate``. Aborted rounds leave the model unchanged and consume
    no privacy budget.
    """
    if not config.feasible:
        warnings.warn(
            f"threshold {config.threshold} exceeds expected survivors "
            f"{config.num_clients * (1 - config.dropout_rate):.1f}; expect frequent aborts",
            stacklevel=2,
        )
    data = generate_data(config)
    pooled = data.pooled()
    trainer = trainer or ToyModel(_initial_weights(config), config.learning_rate, config.local_steps)
    dp_params = config.dp_params()
    bhm_params = config.bhm_params()
    w0 = _initial_weights(config)
    clients, as_state, csp_state = setup(
        config.num_clients,
        config.client_sizes,
        w0,
        config.threshold,
        dp_params,
        bhm_params,
        config.fixed_point(),
        config.modulus_bits,
        seed=config.seed,
    )
    drop_rng = random.Random(f"{config.seed}:dropout")
    metrics = RunMetrics(initial_loss=ToyModel.loss_at(w0, pooled))
    ledger = dp.PrivacyLedger()

    for t in range(1, config.rounds + 1):
        dropped = {c.client_id for c in clients if drop_rng.random() < config.dropout_rate}
        survivors = [c for c in clients if c.client_id not in dropped]
        w = as_state.weights
        updates = {c.client_id: trainer.local_update(w, data.shards[c.client_id]) for c in survivors}
        pre = [float(np.linalg.norm(u)) for u in updates.values()]
        post = [min(x, config.clip_bound) for x in pre]
        clipped = [dp.clip(u, config.clip_bound) for u in updates.values()]
        comp = [bhm.approximation_error(c, bhm_params) / max(np.linalg.norm(c), 1e-300) for c in clipped]
        row = {
            "round": t,
            "survivors": len(survivors),
            "update_norm_pre_clip": float(np.mean(pre)) if pre else 0.0,
            "update_norm_post_clip": float(np.mean(post)) if post else 0.0,
            "clipped_fraction": float(np.mean([x > config.clip_bound for x in pre])) if pre else 0.0,
            "compression_error": float(np.mean(comp)) if comp else 0.0,
        }
        try:
            new_w, transcript = run_round(
                clients, as_state, csp_state, dropped, updates, dp_params, t, config.noise_mode
            )
        except ThresholdAbort as exc:
            log.info("round %d aborted: %s", t, exc)
            eps_t, delta_t = ledger.total()
            row.update(status="aborted", global_loss=ToyModel.loss_at(as_state.weights, pooled),
                       epsilon_total=eps_t, delta_total=delta_t, abort_reason=str(exc))
            metrics.rows.append(row)
            continue
        ledger = ledger.record(dp_params.epsilon, dp_params.delta, t)
        eps_t, delta_t = ledger.total()
        row.update(status="ok", global_loss=ToyModel.loss_at(new_w, pooled),
                   epsilon_total=eps_t, delta_total=delta_t, abort_reason="")
        metrics.rows.append(row)
        if keep_transcripts:
            metrics.transcripts.append(transcript)

    metrics.final_weights = as_state.weights.copy()
    metrics.ledger = ledger
    metrics.public_key = as_state.public_key
    return metrics


def run_plaintext_reference(config: SimConfig, use_bhm: bool = True) -> RunMetrics:
    """Same rounds and dropouts without any cryptography or noise.

    With ``use_bhm=False`` this is plain FedAvg on clipped updates. Intended
    as a comparison baseline, not as an oracle for the secure path's tests.
    """
    data = generate_data(config)
    pooled = data.pooled()
    trainer = ToyModel(_initial_weights(config), config.learning_rate, config.local_steps)
    params = config.bhm_params()
    sizes = config.client_sizes
    drop_rng = random.Random(f"{config.seed}:dropout")
    w = _initial_weights(config)
    metrics = RunMetrics(initial_loss=ToyModel.loss_at(w, pooled))
    for t in range(1, config.rounds + 1):
        dropped = {j for j in range(config.num_clients) if drop_rng.random() < config.dropout_rate}
        alive = [j for j in range(config.num_clients) if j not in dropped]
        row = {"round": t, "survivors": len(alive), "update_norm_pre_clip": 0.0, "update_norm_post_clip": 0.0,
               "clipped_fraction": 0.0, "compression_error": 0.0, "epsilon_total": 0.0, "delta_total": 0.0}
        if len(alive) < config.threshold:
            row.update(status="aborted", global_loss=ToyModel.loss_at(w, pooled), abort_reason="threshold")
            metrics.rows.append(row)
            continue
        total = sum(sizes[j] for j in alive)
        step = np.zeros_like(w)
        for j in alive:
            u = dp.clip(trainer.local_update(w, data.shards[j]), config.clip_bound)
            step += sizes[j] * (bhm.decompress(bhm.compress(u, params)) if use_bhm else u)
        w = w + step / total
        row.update(status="ok", global_loss=ToyModel.loss_at(w, pooled), abort_reason="")
        metrics.rows.append(row)
    metrics.final_weights = w
    return metrics


# ---------------------------------------------------------------------------
# Dropout sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    dropout_rate: float
    rounds_completed: int
    rounds_aborted: int
    mean_survivors: float
    initial_loss: float
    final_loss: float
    frequently_aborting: bool


def compare_dropout_sweep(config: SimConfig, rates: Sequence[float]) -> list[SweepRow]:
    """One simulation per dropout rate, all on the same base seed."""
    out = []
    for rate in rates:
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        cfg = replace(config, dropout_rate=float(rate))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = run_simulation(cfg)
        n_rounds = len(m.rows)
        aborted = len(m.aborted)
        out.append(
            SweepRow(
                dropout_rate=float(rate),
                rounds_completed=n_rounds - aborted,
                rounds_aborted=aborted,
                mean_survivors=float(np.mean([r["survivors"] for r in m.rows])) if m.rows else math.nan,
                initial_loss=m.initial_loss,
                final_loss=m.final_loss,
                frequently_aborting=(not cfg.feasible) or (n_rounds > 0 and aborted / n_rounds > 0.5),
            )
        )
    return out


def sweep_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in SWEEP_COLUMNS])
    return buf.getvalue()
