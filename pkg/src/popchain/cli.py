"""Command line front end: simulations, economics, selection traces and TPS extrapolation."""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from . import econ
from .chain import import_chain
from .multichain import aggregate_tps
from .netsim.config import REFERENCE_BLOCK_SIZES, ConfigError, SimConfig
from .selection import InsufficientRoster, Roster, group_quality, select_signer_group, signer_candidates

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_SIM = 0, 1, 2, 3

METRICS_HEADER = "block_size,interval_ms,tps,stale_rate,half_prop_ms,merger_frac,signer_frac,seed"

ECON_KEYS = ("e", "f", "R", "S_bar", "TA", "q", "z", "mode")
SCENARIO_KEYS = ("name", "seeds", "block_sizes")
CHAINS_KEYS = ("n_chains", "per_chain_tps")
SIM_KEYS = tuple(f.name for f in fields(SimConfig))


class ConfigParseError(Exception):
    def __init__(self, line: int, message: str, path: str = "config"):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


# -- scenario files -----------------------------------------------------------------


@dataclass
class Scenario:
    name: str = "scenario"
    sim: SimConfig = field(default_factory=SimConfig)
    seeds: list[int] = field(default_factory=lambda: [1])
    block_sizes: list[int] = field(default_factory=list)
    econ: dict[str, list[str]] = field(default_factory=dict)
    chains: dict[str, list[str]] = field(default_factory=dict)


def parse_config(text: str, path: str = "config") -> Scenario:
    """``key = value`` lines under ``[scenario]``, ``[sim]``, ``[econ]`` or ``[chains]``.

    Comments start with ``#`` or ``;``. Unknown sections or keys are errors
    that name the offending line.
    """
    allowed = {"scenario": SCENARIO_KEYS, "sim": SIM_KEYS, "econ": ECON_KEYS, "chains": CHAINS_KEYS}
    section = "sim"
    raw: dict[str, dict[str, tuple[int, str]]] = {k: {} for k in allowed}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigParseError(n, f"malformed section header {line!r}", path)
            section = line[1:-1].strip().lower()
            if section not in allowed:
                raise ConfigParseError(n, f"unknown section [{section}]", path)
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise ConfigParseError(n, f"expected key = value, got {line!r}", path)
        if key not in allowed[section]:
            raise ConfigParseError(n, f"unknown key {key!r} in [{section}]", path)
        if key in raw[section]:
            raise ConfigParseError(n, f"duplicate key {key!r}", path)
        raw[section][key] = (n, value)

    sc = Scenario()
    for key, (n, value) in raw["scenario"].items():
        try:
            if key == "name":
                sc.name = value
            elif key == "seeds":
                sc.seeds = parse_int_list(value)
            elif key == "block_sizes":
                sc.block_sizes = parse_int_list(value)
        except ValueError as e:
            raise ConfigParseError(n, str(e), path) from None
    changes = {}
    types = {f.name: f.type for f in fields(SimConfig)}
    for key, (n, value) in raw["sim"].items():
        try:
            changes[key] = convert(value, types[key])
        except ValueError as e:
            raise ConfigParseError(n, f"{key}: {e}", path) from None
    try:
        sc.sim = SimConfig(**changes)
    except (ConfigError, TypeError) as e:
        line = min((n for n, _ in raw["sim"].values()), default=0)
        raise ConfigParseError(line, str(e), path) from None
    sc.econ = {k: split_list(v) for k, (_, v) in raw["econ"].items()}
    sc.chains = {k: split_list(v) for k, (_, v) in raw["chains"].items()}
    return sc


def convert(value: str, type_name: str):
    t = type_name.replace(" ", "")
    if value.lower() in ("none", "") and "None" in t:
        return None
    base = t.split("|")[0]
    if base == "bool":
        v = value.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if base == "int":
        return int(value.replace("_", ""))
    if base == "float":
        return float(value)
    if base == "Fraction":
        return Fraction(value)
    return value


def split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def parse_int_list(value: str) -> list[int]:
    """``1,2,5`` or ``1-5`` (inclusive), or a mix of both."""
    out: list[int] = []
    for part in split_list(value):
        lo, dash, hi = part.partition("-")
        if dash and lo:
            a, b = int(lo), int(hi)
            if b < a:
                raise ValueError(f"empty range {part!r}")
            out.extend(range(a, b + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError("empty list")
    return out


def load_scenario(path: str | None) -> Scenario:
    if path is None:
        return Scenario()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigParseError(0, f"cannot read: {e.strerror}", path) from None
    return parse_config(text, path)


# -- simulate ------------------------------------------------------------------------


def metrics_row(size: int, seed: int, m) -> str:
    return ",".join([
        str(size),
        _dec(m.mean_block_interval, 3),
        _dec(m.tps, 3),
        _dec(m.stale_block_rate, 6),
        _dec(m.median_half_propagation, 1),
        _dec(m.merger_block_bytes_fraction, 6),
        _dec(m.signer_sig_bytes_fraction, 8),
        str(seed),
    ])


def _dec(x: Fraction, places: int) -> str:
    return f"{float(x):.{places}f}"


def _run_one(job: tuple[SimConfig, str | None, str | None]) -> tuple[int, int, str, str]:
    from .netsim import simulate

    cfg, replay_dir, chain_dir = job
    tag = f"{cfg.target_block_size}-{cfg.seed}"
    if replay_dir:
        with open(Path(replay_dir) / f"replay-{tag}.bin", "wb") as fh:
            res = simulate(cfg, fh)
    else:
        res = simulate(cfg)
    if chain_dir:
        (Path(chain_dir) / f"chain-{tag}.txt").write_text(res.export(f"sim-{tag}"))
    return cfg.target_block_size, cfg.seed, metrics_row(cfg.target_block_size, cfg.seed, res.metrics), res.replay_digest


def sim_threads() -> int:
    raw = os.environ.get("GRUUT_SIM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_sweep(jobs: Sequence[tuple], threads: int) -> list[tuple[int, int, str, str]]:
    if threads <= 1 or len(jobs) <= 1:
        out = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            out = list(pool.map(_run_one, jobs))
    out.sort(key=lambda r: (r[0], r[1]))
    return out


def cmd_simulate(args) -> int:
    sc = load_scenario(args.config)
    seeds = parse_int_list(args.seeds) if args.seeds else sc.seeds
    sim = sc.sim
    if args.legacy_open_competition:
        sim = sim.with_(legacy_open_competition=True)
    if args.duration is not None:
        sim = sim.with_(duration=args.duration)
    sizes = parse_int_list(args.block_sizes) if args.block_sizes else (sc.block_sizes or [sim.target_block_size])
    for d in (args.replay_dir, args.chain_dir):
        if d:
            Path(d).mkdir(parents=True, exist_ok=True)
    try:
        jobs = [(sim.with_(target_block_size=s, seed=seed), args.replay_dir, args.chain_dir) for s in sizes for seed in seeds]
    except ConfigError as e:
        raise ConfigParseError(0, str(e), args.config or "arguments") from None
    try:
        rows = run_sweep(jobs, sim_threads())
    except Exception as e:  # any failure inside a run is a simulation failure
        print(f"simulation failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_SIM
    text = "\n".join([METRICS_HEADER] + [r[2] for r in rows]) + "\n"
    _emit(text, args.out)
    if args.digests:
        for size, seed, _, digest in rows:
            print(f"replay {size} {seed} {digest}", file=sys.stderr)
    return EXIT_OK


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- econ ----------------------------------------------------------------------------


def cmd_econ(args) -> int:
    sc = load_scenario(args.config)
    values = dict(sc.econ)
    for key in ECON_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = split_list(v)
    defaults = {"e": ["0.1"], "f": ["0.01"], "R": ["10"], "S_bar": ["10"], "TA": ["10000"]}
    for k, v in defaults.items():
        values.setdefault(k, v)
    try:
        grid = list(itertools.product(values["e"], values["f"], values["R"], values["S_bar"], values["TA"]))
        grid = [(Fraction(e), Fraction(f), int(R), Fraction(S), int(TA)) for e, f, R, S, TA in grid]
        params = [econ.EconParams.of(e, TA, f, R, S) for e, f, R, S, TA in grid]
        q_values = [Fraction(q) for q in values.get("q", [])]
        z_values = [int(z) for z in values.get("z", ["6"])]
        mode = values.get("mode", ["race"])[0]
        for q in q_values:
            for z in z_values:
                econ.EconParams.of(0.5, 1, 0, 1, 1, q, z)
        if mode not in ("race", "poisson"):
            raise econ.EconError(f"unknown mode {mode!r}")
    except (ValueError, ZeroDivisionError, econ.EconError) as e:
        print(f"invalid parameters: {e}", file=sys.stderr)
        return EXIT_USAGE

    if args.out or len(params) > 1:
        _emit("\n".join(econ.sweep(grid)) + "\n", args.out)
    else:
        p = params[0]
        rows = [
            ("colluder_share", p.colluder_share()),
            ("honest_fee_share", p.honest_fee_share()),
            ("min_fee_fraction", p.min_fee_fraction()),
            ("min_bounty_penalty", p.min_bounty_penalty()),
        ]
        print(f"e={econ.fmt(p.e)} f={econ.fmt(p.f)} R={p.R} S_bar={econ.fmt(p.S_bar)} TA={p.TA}")
        for name, v in rows:
            print(f"{name:<20} {econ.fmt(v):>14} {float(v):.6g}")
    for q in q_values:
        for z in z_values:
            pr = econ.catchup_probability(q, z, mode)
            print(f"catchup q={econ.fmt(q)} z={z} mode={mode} {float(pr):.6g}")
    return EXIT_OK


# -- trace-selection -----------------------------------------------------------------


def cmd_trace_selection(args) -> int:
    try:
        text = Path(args.export).read_text()
        ex = import_chain(text)
    except (OSError, ValueError, UnicodeDecodeError) as e:
        print(f"unreadable chain export: {e}", file=sys.stderr)
        return EXIT_USAGE
    if len(ex.blocks) < 2 or not ex.signers:
        print("unreadable chain export: no blocks to trace", file=sys.stderr)
        return EXIT_USAGE
    metric = ex.params.get("metric", "hamming")
    roster = Roster(ex.signers)
    by_height = {}
    for b in ex.blocks:
        if b.height in by_height:
            print(f"unreadable chain export: two blocks at height {b.height}", file=sys.stderr)
            return EXIT_USAGE
        by_height[b.height] = b
    heights = sorted(h for h in by_height if h > 0)
    if args.height is not None:
        if args.height not in by_height or args.height == 0:
            print(f"height {args.height} not in export", file=sys.stderr)
            return EXIT_USAGE
        heights = [args.height]
    bad = []
    for h in heights:
        block, parent = by_height[h], by_height.get(h - 1)
        if parent is None or block.prev_hash != parent.digest:
            print(f"height {h}: parent missing from export", file=sys.stderr)
            return EXIT_USAGE
        problems = verify_signers(block, parent, roster, metric)
        if args.height is not None or args.verbose:
            print_trace(block, parent, roster, metric)
        status = "ok" if not problems else "MISMATCH " + "; ".join(problems)
        print(f"height {h}: {status}")
        if problems:
            bad.append(h)
    print(f"verified {len(heights) - len(bad)}/{len(heights)} heights")
    return EXIT_MISMATCH if bad else EXIT_OK


def verify_signers(block, parent, roster: Roster, metric: str) -> list[str]:
    out = []
    S = block.required_signers
    if len(block.signer_sigs) != S:
        out.append(f"{len(block.signer_sigs)} signatures for S={S}")
    for s in block.signer_sigs:
        try:
            cands = signer_candidates(parent.tx_digest, s.index, S, roster, metric, block.height)
        except (InsufficientRoster, IndexError):
            out.append(f"index {s.index} has no candidates")
            continue
        if s.rank >= len(cands) or cands[s.rank] != (s.distance, s.signer):
            out.append(f"index {s.index} rank {s.rank}: stored {s.signer.hex()[:12]} is not the recomputed choice")
    return out


def print_trace(block, parent, roster: Roster, metric: str) -> None:
    sel = select_signer_group(parent.tx_digest, block.required_signers, roster, metric, block.height)
    print(f"height {block.height} block {block.digest.hex()[:16]} merger {block.merger.hex()[:16]} merger_distance {block.merger_distance}")
    for i, (t, c, d) in enumerate(zip(sel.targets, sel.chosen, sel.distances), start=1):
        print(f"  target {i} {t.hex()[:16]} primary {c.hex()[:16]} distance {d}")
    for s in block.signer_sigs:
        print(f"  signed index {s.index} rank {s.rank} by {s.signer.hex()[:16]} distance {s.distance}")
    print(f"  primary group quality {float(group_quality(sel, metric)):.6f}")


# -- multichain-extrapolate ----------------------------------------------------------


def cmd_multichain_extrapolate(args) -> int:
    sc = load_scenario(args.config)
    chains = args.chains or ",".join(sc.chains.get("n_chains", [])) or "1,10,100"
    try:
        counts = parse_int_list(chains)
        if args.metrics:
            per_size = mean_tps_by_size(Path(args.metrics).read_text())
        else:
            tps = args.tps or (sc.chains.get("per_chain_tps") or [None])[0]
            if tps is None:
                raise ValueError("need --tps or --metrics")
            per_size = {None: Fraction(tps)}
        lines = ["block_size,per_chain_tps,n_chains,aggregate_tps"]
        for size, tps in per_size.items():
            for n in counts:
                agg = aggregate_tps(tps, n)
                lines.append(f"{'' if size is None else size},{float(tps):.3f},{n},{float(agg):.3f}")
    except (OSError, ValueError, KeyError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_USAGE
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def mean_tps_by_size(text: str) -> dict[int, Fraction]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("metrics CSV has no rows")
    acc: dict[int, list[Fraction]] = {}
    for r in rows:
        acc.setdefault(int(r["block_size"]), []).append(Fraction(r["tps"]))
    return {k: sum(v) / len(v) for k, v in sorted(acc.items())}


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="scenario file (key = value with [sections])")
    common.add_argument("--out", default=argparse.SUPPRESS, help="write CSV here instead of stdout")
    common.add_argument("--seeds", default=argparse.SUPPRESS, help="seed list, e.g. 1-5 or 1,3,7")
    common.add_argument("--legacy-open-competition", action="store_true", default=argparse.SUPPRESS,
                        help="every merger competes for every block")

    p = argparse.ArgumentParser(prog="popchain", parents=[common], description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run network simulations, one CSV row per block size and seed")
    s.add_argument("--block-sizes", help=f"override block sizes, e.g. {','.join(map(str, REFERENCE_BLOCK_SIZES))}")
    s.add_argument("--duration", type=int, help="simulated milliseconds per run")
    s.add_argument("--replay-dir", help="write full replay logs here")
    s.add_argument("--chain-dir", help="write main-chain exports here")
    s.add_argument("--digests", action="store_true", help="print replay digests to stderr")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("econ", parents=[common], help="collusion economics and catch-up probabilities")
    for key in ECON_KEYS:
        e.add_argument(f"--{key.replace('_', '-')}", dest=key, help="value or comma list")
    e.set_defaults(func=cmd_econ)

    t = sub.add_parser("trace-selection", parents=[common], help="recompute and verify signer selection of a chain export")
    t.add_argument("export", help="chain export file")
    t.add_argument("--height", type=int)
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_trace_selection)

    m = sub.add_parser("multichain-extrapolate", parents=[common], help="aggregate TPS over N local chains")
    m.add_argument("--tps", help="throughput of one chain")
    m.add_argument("--metrics", help="metrics CSV from simulate; uses mean TPS per block size")
    m.add_argument("--chains", help="chain counts, e.g. 1,10,100")
    m.set_defaults(func=cmd_multichain_extrapolate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    for name in ("config", "out", "seeds"):
        if not hasattr(args, name):
            setattr(args, name, None)
    if not hasattr(args, "legacy_open_competition"):
        args.legacy_open_competition = False
    try:
        return args.func(args)
    except ConfigParseError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
