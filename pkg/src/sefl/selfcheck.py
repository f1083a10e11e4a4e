"""Fast invariant checks run by ``sefl selfcheck``."""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ahe, bhm, dp
from .fedsim import SimConfig, run_plaintext_reference, run_simulation

FAULTS = ("bhm-entry",)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _check_ahe(_fault: str | None) -> str:
    rng = random.Random("selfcheck:ahe")
    kp = ahe.keygen(256, rng)
    pk, sk = kp.public_key, kp.secret_key
    for m in (0, 1, 42, pk.n - 1):
        assert ahe.decrypt(sk, ahe.encrypt(pk, m, rng)) == m, f"roundtrip failed for {m}"
    assert ahe.decrypt(sk, ahe.hom_add(ahe.encrypt(pk, 3, rng), ahe.encrypt(pk, 4, rng))) == 7
    assert ahe.decrypt(sk, ahe.hom_scale(ahe.encrypt(pk, 5, rng), 3)) == 15
    fp = ahe.FixedPointParams()
    xs = [rng.uniform(-1, 1) for _ in range(50)]
    total = ahe.encrypt(pk, 0, rng)
    for x in xs:
        total = ahe.hom_add(total, ahe.encrypt(pk, ahe.encode_fixed(x, fp, pk.n), rng))
    err = abs(ahe.decode_fixed(ahe.decrypt(sk, total), fp, pk.n) - math.fsum(xs))
    assert err <= len(xs) * fp.resolution, f"fixed-point sum error {err}"
    return f"roundtrips, hom_add, hom_scale ok; 50-term sum error {err:.2e}"


def _lstsq_hankel(block: np.ndarray) -> np.ndarray:
    l = block.shape[0]
    A = np.zeros((l * l, 2 * l - 1))
    for i in range(l):
        for j in range(l):
            A[i * l + j, i + j] = 1.0
    return np.linalg.solve(A.T @ A, A.T @ block.ravel())


def _check_bhm(fault: str | None) -> str:
    rng = np.random.default_rng(7)
    worst = -math.inf
    for trial in range(50):
        l = int(rng.integers(2, 9))
        B = rng.normal(size=(l, l))
        g = bhm.project_block(B)
        if fault == "bhm-entry" and trial == 0:
            g = g.copy()
            g[0] += 1.0
        ours = np.linalg.norm(B - bhm.reconstruct_block(g, l))
        best = np.linalg.norm(B - bhm.reconstruct_block(_lstsq_hankel(B), l))
        worst = max(worst, ours - best)
    assert worst <= 1e-10, f"projection worse than least-squares optimum by {worst:.3e}"
    return f"50 random blocks, max excess error {worst:.1e}"


def _check_sigma(_fault: str | None) -> str:
    s = dp.derive_sigma(1.0, 1.25 / math.e**2)
    assert abs(s - 2.0) <= 1e-15, f"sigma(1, 1.25/e^2) = {s}"
    s2 = dp.derive_sigma(2.0, 1.25 / math.e**2)
    assert abs(s2 - 1.0) <= 1e-15, f"sigma(2, 1.25/e^2) = {s2}"
    return "sigma(1, 1.25/e^2) = 2, sigma(2, .) = 1"


def _check_oracle(_fault: str | None) -> str:
    cfg = SimConfig(num_clients=4, rounds=3, threshold=2, epsilon=math.inf, clip_bound=1e3, seed=11)
    secure = run_simulation(cfg)
    plain = run_plaintext_reference(cfg, use_bhm=True)
    diff = float(np.max(np.abs(secure.final_weights - plain.final_weights)))
    tol = cfg.rounds * cfg.num_clients * 2.0**-cfg.frac_bits
    assert diff <= tol, f"secure vs plaintext max diff {diff:.3e} > {tol:.3e}"
    return f"3-round micro-run, max weight diff {diff:.1e}"


def _check_csr(_fault: str | None) -> str:
    a = np.array([[1.0, 0, 0, 0], [0, 0, 2, 0], [0, 0, 0, 0], [0, 3, 0, 0]])
    b = np.array([[0, 4.0, 0, 0], [0, 0, 0, 0], [5, 0, 0, 0], [0, 0, 0, 6]])
    rep = bhm.demonstrate_csr_pitfall(bhm.CsrUpdate.from_dense(a), bhm.CsrUpdate.from_dense(b))
    assert not rep.blind_matches_truth, "blind CSR addition unexpectedly matched"
    assert rep.bhm_matches_truth, "BHM addition diverged"
    return rep.summary()


CHECKS: tuple[tuple[str, Callable[[str | None], str]], ...] = (
    ("ahe_roundtrip", _check_ahe),
    ("bhm_projection_optimality", _check_bhm),
    ("sigma_formula", _check_sigma),
    ("oracle_equivalence", _check_oracle),
    ("csr_pitfall", _check_csr),
)


def run_selfcheck(inject_fault: str | None = None) -> list[CheckResult]:
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ValueError(f"unknown fault {inject_fault!r}; known: {FAULTS}")
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            detail, ok = fn(inject_fault), True
        except AssertionError as exc:
            detail, ok = str(exc), False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  time    detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:5.2f}s  {r.detail}")
    return "\n".join(lines)
