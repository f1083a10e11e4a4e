"""Command-line entry point: ``sefl run | sweep | selfcheck``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import ahe
from .bhm import grid_shape
from .config import ConfigError, ExperimentConfig, load_config
from .fedsim import RunMetrics, compare_dropout_sweep, run_simulation, sweep_to_csv
from .selfcheck import FAULTS, format_table, run_selfcheck

OUTPUT_ROOT_ENV = "SEFL_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTS = 3
EXIT_SELFCHECK = 4

log = logging.getLogger("sefl")


def resolve_output_dir(output_dir: str) -> Path:
    """Relative output directories are placed under ``$SEFL_OUTPUT_ROOT`` when set."""
    p = Path(output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _parse_rates(text: str) -> list[float]:
    rates = []
    for part in text.split(","):
        part = part.strip()
        try:
            r = float(part)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {part!r}") from None
        if not 0 <= r < 1:
            raise argparse.ArgumentTypeError(f"dropout rate {r} outside [0, 1)")
        rates.append(r)
    if not rates:
        raise argparse.ArgumentTypeError("empty rate list")
    return rates


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for key in ("seed", "rounds", "output_dir"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    if getattr(args, "save_transcript", False):
        out["save_transcript"] = True
    return out


def _load(args: argparse.Namespace) -> ExperimentConfig | None:
    try:
        return load_config(args.config, _overrides(args))
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return None


def _summary(cfg: ExperimentConfig, m: RunMetrics) -> str:
    eps, delta = m.ledger.total()
    return "\n".join(
        [
            f"rounds: {len(m.rows)} ({len(m.completed)} completed, {len(m.aborted)} aborted)",
            f"initial loss: {m.initial_loss!r}",
            f"final loss: {m.final_loss!r}",
            f"privacy spent (basic composition): epsilon={eps!r}, delta={delta!r}",
            f"noise multiplier sigma: {cfg.sim.dp_params().sigma!r}",
            f"ciphertexts per upload: {_cipher_count(cfg)} (dense would be {cfg.sim.model_dim})",
        ]
    ) + "\n"


def _cipher_count(cfg: ExperimentConfig) -> int:
    rows, cols = cfg.sim.model_shape
    gr, gc = grid_shape(rows, cols, cfg.sim.block_size)
    return gr * gc * (2 * cfg.sim.block_size - 1)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if cfg is None:
        return EXIT_CONFIG
    out = resolve_output_dir(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    m = run_simulation(cfg.sim, keep_transcripts=cfg.save_transcript)
    (out / "metrics.csv").write_text(m.to_csv())
    (out / "ledger.csv").write_text(m.ledger.to_csv())
    if cfg.save_transcript:
        (out / "transcript.jsonl").write_text("".join(t.to_jsonl() for t in m.transcripts))
        (out / "public_key.bin").write_bytes(ahe.public_key_to_bytes(m.public_key))
    summary = _summary(cfg, m)
    (out / "summary.txt").write_text(summary)
    sys.stdout.write(summary)
    if m.rows and len(m.aborted) * 2 > len(m.rows):
        print(
            f"error: {len(m.aborted)} of {len(m.rows)} rounds aborted below threshold "
            f"{cfg.sim.threshold}; lower the threshold or the dropout rate",
            file=sys.stderr,
        )
        return EXIT_ABORTS
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if cfg is None:
        return EXIT_CONFIG
    out = resolve_output_dir(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    rows = compare_dropout_sweep(cfg.sim, args.dropout_rates)
    (out / "sweep.csv").write_text(sweep_to_csv(rows))
    for r in rows:
        flag = "  [frequently aborting]" if r.frequently_aborting else ""
        print(f"dropout {r.dropout_rate:.2f}: final loss {r.final_loss:.6g}, "
              f"{r.rounds_completed} completed / {r.rounds_aborted} aborted{flag}")
    return EXIT_OK


def cmd_selfcheck(args: argparse.Namespace) -> int:
    results = run_selfcheck(args.inject_fault)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFCHECK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sefl", description="Secure federated learning simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("config", help="YAML experiment config")
        p.add_argument("--output-dir", help="override output_dir from the config")
        p.add_argument("--seed", type=int, help="override seed")
        p.add_argument("--rounds", type=int, help="override rounds")

    p_run = sub.add_parser("run", help="run one simulation")
    add_common(p_run)
    p_run.add_argument("--save-transcript", action="store_true", help="write transcript.jsonl")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="compare dropout rates")
    add_common(p_sweep)
    p_sweep.add_argument("--dropout-rates", type=_parse_rates, required=True, help="e.g. 0,0.25,0.5,0.75")
    p_sweep.set_defaults(func=cmd_sweep)

    p_check = sub.add_parser("selfcheck", help="run the fast invariant suite")
    p_check.add_argument("--inject-fault", choices=FAULTS, help=argparse.SUPPRESS)
    p_check.set_defaults(func=cmd_selfcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
