"""Clipping, Gaussian-mechanism calibration, noise sampling and accounting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DpParams:
    """Privacy knobs for one training run.

    ``epsilon = math.inf`` is accepted and yields ``sigma = 0`` (noise off),
    which is how the oracle-equivalence runs are configured.
    """

    epsilon: float
    delta: float
    clip_bound: float
    scaling_factor: float = 1.0
    rounds_budgeted: int = 1
    divide_by_L: bool = False
    sigma: float = field(init=False)

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ValueError(f"clip_bound must be > 0, got {self.clip_bound}")
        if not self.scaling_factor > 0:
            raise ValueError(f"scaling_factor must be > 0, got {self.scaling_factor}")
        object.__setattr__(self, "sigma", derive_sigma(self.epsilon, self.delta))

    def noise_std(self, participants: int = 1) -> float:
        """Standard deviation of the noise added to the released aggregate."""
        return self.sigma * sensitivity(self, participants)


def clip(update: np.ndarray, C: float) -> np.ndarray:
    """Scale ``update`` onto the L2 ball of radius ``C`` if it lies outside."""
    if not C > 0:
        raise ValueError(f"clip bound must be > 0, got {C}")
    u = np.asarray(update, dtype=float)
    norm = float(np.linalg.norm(u))
    if norm <= C:
        return u.copy()
    return u * (C / norm)


def derive_sigma(epsilon: float, delta: float) -> float:
    """Noise multiplier of the classical Gaussian mechanism."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def sensitivity(params: DpParams, L: int = 1) -> float:
    """L2 sensitivity of the released aggregate: ``kappa*C``, or ``kappa*C/L``
    when ``params.divide_by_L`` is set."""
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    s = params.scaling_factor * params.clip_bound
    return s / L if params.divide_by_L else s


# ---------------------------------------------------------------------------
# Gaussian sampling
# ---------------------------------------------------------------------------

_TWO_NEG_53 = 2.0**-53


def box_muller(raw: np.ndarray) -> np.ndarray:
    """Standard normals from pairs of uniform 64-bit words.

    ``raw`` has shape ``(dim, 2)``; each row yields one N(0, 1) sample via the
    cosine branch. The first word maps to ``(0, 1]`` so the log is finite.
    """
    raw = np.asarray(raw, dtype=np.uint64)
    u1 = ((raw[:, 0] >> np.uint64(11)).astype(float) + 1.0) * _TWO_NEG_53
    u2 = (raw[:, 1] >> np.uint64(11)).astype(float) * _TWO_NEG_53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def gaussian_from_bits(bits: bytes, dim: int, std: float) -> np.ndarray:
    """Turn ``16 * dim`` uniform bytes into ``dim`` samples of N(0, std^2)."""
    need = 16 * dim
    if len(bits) < need:
        raise ValueError(f"need {need} random bytes for {dim} samples, got {len(bits)}")
    if std == 0:
        return np.zeros(dim)
    raw = np.frombuffer(bits[:need], dtype="<u8").reshape(dim, 2)
    return std * box_muller(raw)


def sample_gaussian_vector(dim: int, std: float, seed: int) -> np.ndarray:
    """i.i.d. N(0, std^2) draws from a Philox counter-based stream."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.zeros(dim)
    raw = np.random.Philox(seed).random_raw(2 * dim).reshape(dim, 2)
    return std * box_muller(raw)


# ---------------------------------------------------------------------------
# Accounting (basic composition)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    epsilon: float
    delta: float
    epsilon_total: float
    delta_total: float


@dataclass(frozen=True)
class PrivacyLedger:
    entries: tuple[LedgerEntry, ...] = ()

    def record(self, epsilon: float, delta: float, round: int | None = None) -> "PrivacyLedger":
        eps_t, delta_t = self.total()
        idx = len(self.entries) if round is None else round
        entry = LedgerEntry(idx, epsilon, delta, eps_t + epsilon, delta_t + delta)
        return PrivacyLedger(self.entries + (entry,))

    def total(self) -> tuple[float, float]:
        if not self.entries:
            return 0.0, 0.0
        last = self.entries[-1]
        return last.epsilon_total, last.delta_total

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "epsilon", "delta", "epsilon_total", "delta_total"])
        for e in self.entries:
            w.writerow([e.round, repr(e.epsilon), repr(e.delta), repr(e.epsilon_total), repr(e.delta_total)])
        return buf.getvalue()


def ledger_record(ledger: PrivacyLedger, epsilon: float, delta: float, round: int | None = None) -> PrivacyLedger:
    return ledger.record(epsilon, delta, round)


def ledger_total(ledger: PrivacyLedger) -> tuple[float, float]:
    return ledger.total()
