"""``bsc`` command line: fit, placebo, waic, scm.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 finished but
diagnostics flagged (max R-hat > 1.05 or any divergence).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, HyperParams, PRESETS, check_effect_prior, parse_config, preset
from .harness import (accuracy_comparison, coverage_by_year, fit_bsc, run_placebo_study,
                      waic_scan, write_records)
from .nuts import SamplerError, SamplerSettings, write_trace
from .panel import PanelError, deflate, load_csv, load_deflator
from .posterior import summary_document, write_summary
from .scm import fit_scm, relabel_significance, write_effects_csv, write_weights_csv

log = logging.getLogger("bsc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIAGNOSTICS = 0, 1, 2, 3
RHAT_LIMIT = 1.05
DEFAULT_SEED = 20190401
MANIFEST = "manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _factor_range(text):
    """``3..8`` (inclusive), ``3,5,8`` or a single integer."""
    m = re.fullmatch(r"\s*(\d+)\s*\.\.\s*(\d+)\s*", text)
    if m:
        a, b = int(m.group(1)), int(m.group(2))
        if a < 1 or b < a:
            raise argparse.ArgumentTypeError(f"bad factor range {text!r}")
        return list(range(a, b + 1))
    try:
        vals = [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad factor list {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"bad factor list {text!r}")
    return vals


def _methods(text):
    vals = [m.strip() for m in text.split(",") if m.strip()]
    bad = set(vals) - {"bsc", "scm"}
    if not vals or bad:
        raise argparse.ArgumentTypeError(f"methods must be drawn from bsc,scm; got {text!r}")
    return vals


def _data_args(p, config=True):
    p.add_argument("--data", required=True, help="long CSV with society,year,outcome")
    p.add_argument("--treated", required=True, help="name of the treated society")
    p.add_argument("--start", required=True, type=int, help="first treated year")
    p.add_argument("--deflator", help="optional year,deflator CSV")
    p.add_argument("--base-year", type=int, help="price base year for --deflator")
    if config:
        p.add_argument("--config", required=True,
                       help="TOML hyperparameter file, or a preset name: " + ", ".join(PRESETS))
    p.add_argument("--out", default="bsc_out", help="output directory")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)


def _sampler_args(p, chains, tune, draws):
    p.add_argument("--chains", type=_positive_int, default=chains)
    p.add_argument("--tune", type=_nonneg_int, default=tune)
    p.add_argument("--draws", type=_positive_int, default=draws)
    p.add_argument("--target-accept", type=float, default=0.9)
    p.add_argument("--max-treedepth", type=_positive_int, default=12)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bsc", description="Bayesian synthetic control")
    parser.add_argument("--version", action="version", version=f"bsc {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit BSC to one panel")
    _data_args(p)
    _sampler_args(p, 2, 5000, 25000)
    p.add_argument("--ci-level", type=float, default=0.95)
    p.add_argument("--factors", type=_positive_int, help="override n_factors from the config")

    p = sub.add_parser("placebo", help="relabel every comparison society and score predictions")
    _data_args(p)
    _sampler_args(p, 2, 1000, 2000)
    p.add_argument("--methods", type=_methods, default=["bsc", "scm"])
    p.add_argument("--reuse-prior", action="store_true",
                   help="use the full-panel factor prior for every placebo run")

    p = sub.add_parser("waic", help="WAIC for a range of factor counts")
    _data_args(p)
    _sampler_args(p, 2, 1000, 2000)
    p.add_argument("--factors", type=_factor_range, required=True, help="e.g. 3..8")

    p = sub.add_parser("scm", help="synthetic control weights and relabeling test")
    _data_args(p, config=False)
    return parser


# -- helpers ---------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_panel(args):
    panel = load_csv(args.data, args.treated, args.start)
    if args.deflator:
        if args.base_year is None:
            raise PanelError("--deflator needs --base-year")
        panel = deflate(panel, load_deflator(args.deflator), args.base_year)
    return panel


def _load_hyper(args) -> HyperParams:
    if not Path(args.config).exists() and args.config.lower() in PRESETS:
        hyper = preset(args.config)
    else:
        hyper = parse_config(args.config)
    if getattr(args, "factors", None) and isinstance(args.factors, int):
        hyper = hyper.replace(n_factors=args.factors)
    return hyper


def _settings(args) -> SamplerSettings:
    return SamplerSettings(chains=args.chains, tune=args.tune, draws=args.draws,
                           target_accept=args.target_accept, max_treedepth=args.max_treedepth,
                           seed=args.seed)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def _diagnostics_ok(max_rhat, n_div) -> bool:
    bad_rhat = max_rhat is not None and np.isfinite(max_rhat) and max_rhat > RHAT_LIMIT
    return not bad_rhat and n_div == 0


class _Run:
    """Collects artifacts and writes the manifest atomically at the end."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.outputs: list[str] = []
        self.config = None

    def path(self, name) -> Path:
        self.outputs.append(name)
        return self.out / name

    def finish(self, code: int, extra: dict | None = None) -> int:
        inputs = {}
        for attr in ("data", "config", "deflator"):
            p = getattr(self.args, attr, None)
            if p and Path(p).is_file():
                inputs[str(p)] = _sha256(p)
        manifest = {
            "command": self.args.command, "argv": self.argv, "config": self.config,
            "seed": self.args.seed, "inputs": inputs, "tool_version": __version__,
            "started": self.started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "outputs": sorted(self.outputs), "exit_code": code,
        }
        if extra:
            manifest.update(extra)
        tmp = self.out / (MANIFEST + ".tmp")
        _write_json(tmp, manifest)
        os.replace(tmp, self.out / MANIFEST)
        return code


# -- commands ------------------------------------------------------------------

def cmd_fit(args, run: _Run) -> int:
    panel = _load_panel(args)
    hyper = _load_hyper(args)
    run.config = hyper.as_dict()
    check_effect_prior(hyper, panel)
    settings = _settings(args)
    res = fit_bsc(panel, hyper, settings, ci_level=args.ci_level)
    doc = summary_document(res.ctx, res.trace, res.counterfactual, res.effect, res.waic,
                           res.rhat, extra={"settings": asdict(settings), "hyper": hyper.as_dict(),
                                            "treated": panel.treated_name})
    write_summary(doc, run.path("summary.json"))
    write_trace(res.trace, run.path("trace.bin"))
    ok = _diagnostics_ok(res.max_rhat, res.trace.n_divergences)
    if not ok:
        log.warning("diagnostics flagged: max R-hat %.3f, %d divergences",
                    res.max_rhat, res.trace.n_divergences)
    return EXIT_OK if ok else EXIT_DIAGNOSTICS


def cmd_placebo(args, run: _Run) -> int:
    panel = _load_panel(args)
    hyper = _load_hyper(args)
    run.config = hyper.as_dict()
    report = run_placebo_study(panel, hyper, _settings(args), args.methods,
                               reuse_prior=args.reuse_prior, config_tag=Path(args.config).stem)
    report.write_csv(run.path("placebo_report.csv"))
    write_records(run.path("accuracy_by_year.csv"), accuracy_comparison(report))
    if "bsc" in report.methods:
        write_records(run.path("coverage_by_year.csv"), coverage_by_year(report))
    if report.failures:
        _write_json(run.path("placebo_failures.json"), report.failures)
    ok = all(_diagnostics_ok(r.get("max_rhat"), r.get("n_divergences", 0)) for r in report.runs)
    return EXIT_OK if ok else EXIT_DIAGNOSTICS


def cmd_waic(args, run: _Run) -> int:
    panel = _load_panel(args)
    hyper = _load_hyper(args)
    run.config = hyper.as_dict()
    scan = waic_scan(panel, hyper, _settings(args), args.factors,
                     config_tag=Path(args.config).stem)
    scan.write_csv(run.path("waic_scan.csv"))
    ok = all(r["status"] == "ok" and _diagnostics_ok(r["max_rhat"], r["n_divergences"])
             for r in scan.records)
    return EXIT_OK if ok else EXIT_DIAGNOSTICS


def cmd_scm(args, run: _Run) -> int:
    panel = _load_panel(args)
    fit = fit_scm(panel)
    write_weights_csv(fit, run.path("scm_weights.csv"))
    rel = relabel_significance(panel)
    write_effects_csv(rel, run.path("scm_placebo_effects.csv"))
    _write_json(run.path("scm_summary.json"), {
        "treated": panel.treated_name, "pre_loss": fit.pre_loss, "converged": fit.converged,
        "years": [{"year": int(y), "observed": float(o), "synthetic": float(c),
                   "effect": float(o - c)}
                  for y, o, c in zip(fit.post_years, fit.observed_post, fit.counterfactual)],
        "rank": rel.rank, "rank_excluding_target": rel.rank_excluding_target,
        "significant": rel.significant, "failures": rel.failures,
    })
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "placebo": cmd_placebo, "waic": cmd_waic, "scm": cmd_scm}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "fit" and not 0 < args.ci_level < 1:
        parser.error("--ci-level must lie in (0, 1)")
    if not 0 < getattr(args, "target_accept", 0.5) < 1:
        parser.error("--target-accept must lie in (0, 1)")
    try:
        run = _Run(args, argv)
    except OSError as exc:
        print(f"bsc: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        code = COMMANDS[args.command](args, run)
    except (PanelError, ConfigError, SamplerError, FileNotFoundError, ValueError) as exc:
        print(f"bsc: {exc}", file=sys.stderr)
        return run.finish(EXIT_DATA, {"error": str(exc)})
    return run.finish(code)


if __name__ == "__main__":
    sys.exit(main())
