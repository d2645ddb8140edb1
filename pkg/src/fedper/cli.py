"""Command line runner: ``run``, ``compare`` and ``schedule``.

Exit codes: 0 success, 1 runtime failure, 2 bad config or arguments,
3 audit or leakage violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from .cohort import generate_cohort, load_corpus, split_corpus
from .config import RunConfig, load_config
from .errors import ConfigError
from .federation import REGIMES
from .metrics import aggregate, aggregate_by_subject
from .protocol import build_schedule, schedule_csv
from .regimes import first_step_identical, run_seed

log = logging.getLogger("fedper")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_AUDIT = 0, 1, 2, 3
METRICS = ("acc", "f1", "pr_auc")
RESULT_FIELDS = ("regime", "subject", "session", "acc", "f1", "pr_auc", "n_test", "seed")
OUTPUT_FILES = ("results.csv", "summary.csv", "losses.csv", "audit.txt", "manifest.txt")


def fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def pct(v: float) -> str:
    return "nan" if math.isnan(v) else str(math.floor(v * 100 + 0.5))


def build_cohort(cfg: RunConfig, seed: int):
    if cfg.corpus is not None:
        loaded = load_corpus(cfg.corpus)
        if loaded.warnings:
            log.warning("%s: skipped %d unusable labels or frames", cfg.corpus, loaded.warnings)
        return split_corpus(loaded.clients, cfg.n_pretrain_clients)
    spec = cfg.cohort
    if cfg.cohort_per_seed:
        spec = replace(spec, seed=spec.seed + seed)
    return generate_cohort(spec)


@dataclass
class SeedSummary:
    """What one seed contributes to the output files."""

    seed: int
    rows: list
    loss_rows: list
    audit_lines: list
    violations: int
    leaks: int
    first_step_ok: bool
    freeze_calls: int
    freeze_failures: int
    n_params: int
    n_shared: int
    n_test_clients: int
    round_lines: list


def run_one(cfg: RunConfig, seed: int) -> SeedSummary:
    cohort = build_cohort(cfg, seed)
    res = run_seed(cohort, seed, cfg.regimes, cfg.federation, cfg.protocol, cfg.model, cfg.inject_fault)
    rows, loss_rows, lines, rounds = [], list(res.pretrain_loss_rows), [], []
    violations = leaks = calls = failures = 0
    for name in cfg.regimes:
        r = res.regimes[name]
        rows += r.rows
        loss_rows += r.loss_rows
        n_leak = sum(n for _, _, n in r.leaks)
        leaks += n_leak
        if r.audit is not None:
            lines.append(f"seed={seed} {r.audit.summary()}")
            lines += [f"seed={seed}   {d}" for d in r.audit.details]
            if name == "PFDL":
                violations += r.audit.violations
        bad = sum(1 for before, after, ret in r.freeze_checks if not before == after == ret)
        calls += len(r.freeze_checks)
        failures += bad
        if r.freeze_checks:
            lines.append(f"seed={seed} regime={name} freeze_checks={len(r.freeze_checks)} failures={bad}")
        lines.append(f"seed={seed} regime={name} leaked_test_frames={n_leak}")
        rounds += [f"seed={seed} regime={name} round={x.t} selected={len(x.selected)} messages={x.n_messages} "
                   f"shared_transfers={x.n_shared_transfers} bytes={x.payload_bytes}" for x in r.rounds]
    same = first_step_identical(res)
    lines.append(f"seed={seed} first_step_matches_BCDL={'yes' if same else 'no'}")
    return SeedSummary(seed, rows, loss_rows, lines, violations, leaks, same, calls, failures,
                       res.n_params, res.n_shared, len(cohort.test), rounds)


def _threads() -> int:
    raw = os.environ.get("FEDPER_THREADS", "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        log.warning("ignoring FEDPER_THREADS=%r", raw)
        return 1


def run_all(cfg: RunConfig) -> list[SeedSummary]:
    workers = min(_threads(), len(cfg.seeds))
    if workers == 1:
        return [run_one(cfg, s) for s in cfg.seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, [cfg] * len(cfg.seeds), cfg.seeds))


# -- writers -----------------------------------------------------------------


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def results_csv(rows) -> str:
    order = {r: i for i, r in enumerate(REGIMES)}
    rows = sorted(rows, key=lambda r: (r["seed"], order[r["regime"]], r["session"], r["subject"]))
    return _csv(RESULT_FIELDS, ([r["regime"], r["subject"], r["session"], fmt(r["acc"]), fmt(r["f1"]),
                                 fmt(r["pr_auc"]), r["n_test"], r["seed"]] for r in rows))


def summarize(rows, regimes) -> list[tuple]:
    """``(regime, metric, mean, std, n_excluded)``; subjects are averaged first."""
    out = []
    for name in regimes:
        mine = [r for r in rows if r["regime"] == name]
        for m in METRICS:
            try:
                mean, std, excluded = aggregate_by_subject((r["subject"], r[m]) for r in mine)
            except ValueError:
                mean, std, excluded = math.nan, math.nan, len(mine)
            out.append((name, m, mean, std, excluded))
    return out


def summary_csv(rows, regimes) -> str:
    return _csv(("regime", "metric", "mean", "std"),
                ((r, m, fmt(mean), fmt(std)) for r, m, mean, std, _ in summarize(rows, regimes)))


def losses_csv(loss_rows) -> str:
    order = {r: i for i, r in enumerate(REGIMES)}
    rows = sorted(loss_rows, key=lambda r: (r[1], order[r[0]], r[2], r[3], r[4]))
    return _csv(("regime", "seed", "step", "epoch", "split", "loss"),
                ((r, s, st, e, sp, fmt(v)) for r, s, st, e, sp, v in rows))


def manifest_txt(cfg: RunConfig, summaries) -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    first = summaries[0]
    fed = cfg.federation
    lines = [
        f"package_version={version}",
        f"numpy_version={np.__version__}",
        f"config_sha256={cfg.digest}",
        f"regimes={','.join(cfg.regimes)}",
        f"seeds={','.join(str(s) for s in cfg.seeds)}",
        f"cohort={'corpus:' + str(cfg.corpus) if cfg.corpus else 'synthetic'}",
        f"cohort_spec={cfg.cohort}",
        f"cohort_per_seed={cfg.cohort_per_seed}",
        f"test_clients={first.n_test_clients}",
        f"federation=C={fed.client_fraction} E={fed.local_epochs} B={fed.batch_size} "
        f"F={fed.finetune_epochs} lr={fed.lr} alpha={fed.finetune_decay} "
        f"rounds_per_step={fed.rounds_per_step} patience={fed.patience}",
        f"protocol={cfg.protocol}",
        f"model={cfg.model}",
        f"n_params={first.n_params}",
        f"n_shared={first.n_shared}",
        f"n_local={first.n_params - first.n_shared}",
        f"inject_fault={cfg.inject_fault}",
        "files=" + ",".join(OUTPUT_FILES),
        f"audit={'PASS' if audit_ok(summaries) else 'FAIL'}",
    ]
    for s in summaries:
        lines += s.round_lines
    return "\n".join(lines) + "\n"


def audit_ok(summaries) -> bool:
    return all(s.violations == 0 and s.leaks == 0 and s.freeze_failures == 0 and s.first_step_ok
               for s in summaries)


def audit_txt(summaries) -> str:
    lines = []
    for s in summaries:
        lines += s.audit_lines
    v = sum(s.violations for s in summaries)
    leaks = sum(s.leaks for s in summaries)
    calls = sum(s.freeze_calls for s in summaries)
    fails = sum(s.freeze_failures for s in summaries)
    ok = audit_ok(summaries)
    lines.append(f"TOTAL pfdl_violations={v} leaked_test_frames={leaks} freeze_checks={calls} "
                 f"freeze_failures={fails} status={'PASS' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n"


def write_outputs(cfg: RunConfig, summaries) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r for s in summaries for r in s.rows]
    texts = {
        "results.csv": results_csv(rows),
        "summary.csv": summary_csv(rows, cfg.regimes),
        "losses.csv": losses_csv([r for s in summaries for r in s.loss_rows]),
        "audit.txt": audit_txt(summaries),
        "manifest.txt": manifest_txt(cfg, summaries),
    }
    for name, text in texts.items():
        with open(out / name, "w", newline="") as fh:
            fh.write(text)
    return out


# -- commands ----------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    seeds = None
    if args.seeds:
        try:
            seeds = [int(v) for v in args.seeds.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--seeds: expected comma separated integers, got {args.seeds!r}") from None
        if not seeds:
            raise ConfigError("--seeds: empty list")
    cfg = cfg.with_overrides(seeds, args.out)
    summaries = run_all(cfg)
    out = write_outputs(cfg, summaries)
    print(f"wrote {len(OUTPUT_FILES)} files to {out}")
    for line in summary_lines(summarize([r for s in summaries for r in s.rows], cfg.regimes)):
        print(line)
    if not audit_ok(summaries):
        violations = sum(s.violations for s in summaries)
        leaks = sum(s.leaks for s in summaries)
        fails = sum(s.freeze_failures for s in summaries)
        print(f"audit FAILED: {violations} PFDL violations, {leaks} leaked frames, "
              f"{fails} freeze failures; see {out / 'audit.txt'}", file=sys.stderr)
        return EXIT_AUDIT
    return EXIT_OK


def summary_lines(summary) -> list[str]:
    by = defaultdict(dict)
    for regime, metric, mean, std, _ in summary:
        by[regime][metric] = (mean, std)
    lines = [f"{'regime':<6} " + " ".join(f"{m:>9}" for m in METRICS)]
    for regime, ms in by.items():
        lines.append(f"{regime:<6} " + " ".join(f"{pct(ms[m][0]):>4}±{pct(ms[m][1]):<4}" for m in METRICS))
    return lines


def read_results(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RESULT_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"{path}: missing columns {sorted(missing)}")
        rows = []
        for r in reader:
            r["session"] = int(r["session"])
            r["seed"] = int(r["seed"])
            r["n_test"] = int(r["n_test"])
            for m in METRICS:
                r[m] = float(r[m])
            rows.append(r)
    return rows


def head_to_head(rows, a: str, b: str, metric: str = "f1") -> list[tuple[int, int, int, int]]:
    """Per session ``(session, wins_a, wins_b, ties)`` over subjects seen by both.

    Each subject's score for a session is its mean over seeds.
    """
    cell = defaultdict(list)
    for r in rows:
        cell[(r["regime"], r["session"], r["subject"])].append(r[metric])
    mean = {k: aggregate(v)[0] if any(not math.isnan(x) for x in v) else math.nan for k, v in cell.items()}
    out = []
    for session in sorted({r["session"] for r in rows}):
        wa = wb = ties = 0
        subjects = sorted({s for (reg, ses, s) in mean if ses == session})
        for s in subjects:
            ka, kb = (a, session, s), (b, session, s)
            if ka not in mean or kb not in mean or math.isnan(mean[ka]) or math.isnan(mean[kb]):
                continue
            if mean[ka] > mean[kb]:
                wa += 1
            elif mean[kb] > mean[ka]:
                wb += 1
            else:
                ties += 1
        out.append((session, wa, wb, ties))
    return out


def per_subject_table(rows, regimes, metric: str = "f1") -> list[list[str]]:
    """Subject rows by regime columns: each cell averages sessions and seeds."""
    vals = defaultdict(list)
    for r in rows:
        vals[(r["subject"], r["regime"])].append(r[metric])
    table = []
    for subject in sorted({r["subject"] for r in rows}):
        line = [subject]
        for reg in regimes:
            v = [x for x in vals.get((subject, reg), []) if not math.isnan(x)]
            line.append(pct(aggregate(v)[0]) if v else "-")
        table.append(line)
    return table


def cmd_compare(args) -> int:
    path = Path(args.dir) / "results.csv"
    if not path.exists():
        print(f"error: {path} not found", file=sys.stderr)
        return EXIT_CONFIG
    rows = read_results(path)
    present = [r for r in REGIMES if any(x["regime"] == r for x in rows)]
    missing = [r for r in (args.a, args.b) if r not in present]
    if missing:
        print(f"error: regime(s) {','.join(missing)} not in {path}; available: {','.join(present) or 'none'}",
              file=sys.stderr)
        return EXIT_CONFIG
    print(f"head-to-head {args.a} vs {args.b} on {args.metric} (subjects; seeds averaged)")
    print("session,wins_" + args.a + ",wins_" + args.b + ",ties")
    for session, wa, wb, ties in head_to_head(rows, args.a, args.b, args.metric):
        print(f"{session},{wa},{wb},{ties}")
    print()
    print(f"per-subject {args.metric} (%), averaged over sessions and seeds")
    print(",".join(["subject"] + present))
    for line in per_subject_table(rows, present, args.metric):
        print(",".join(line))
    print()
    print("mean±std across subjects (%)")
    for line in summary_lines(summarize(rows, present)):
        print(line)
    return EXIT_OK


def cmd_schedule(args) -> int:
    cfg = load_config(args.config)
    cohort = build_cohort(cfg, cfg.seeds[0])
    sys.stdout.write(schedule_csv(build_schedule(cohort.test)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedper", description="Federated personalization simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every regime for every seed and write the output files")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", help="comma separated seeds overriding the config")
    p.add_argument("--out", help="output directory overriding the config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="head-to-head and summary tables from a results directory")
    p.add_argument("--dir", required=True)
    p.add_argument("--a", default="PFDL", type=str.upper)
    p.add_argument("--b", default="FDL", type=str.upper)
    p.add_argument("--metric", default="f1", choices=METRICS)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("schedule", help="print the session schedule of the test cohort as CSV")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_schedule)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
