"""Command-line entry point.

Run with:
    python app.py born --alpha 0.7854 --gamma 0
    python app.py mc --config experiment.json --samples 100000 --out mc.csv

Exit codes: 0 success, 2 validation error, 3 numerical guard tripped,
4 I/O error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from nlclab import __version__
from nlclab.config import RunSettings
from nlclab.errors import ConfigError, NlcLabError, OutputError
from nlclab.orchestrator import ExperimentOrchestrator, RunResult
from nlclab.physics.entangle import CANONICAL_SETTINGS
from nlclab.utils.logs import get_logger


logger = logging.getLogger(__name__)

Handler = Callable[[ExperimentOrchestrator, argparse.Namespace], RunResult]


def _angles(text: str) -> List[float]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("expected four comma-separated angles a,a2,b,b2")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="Table format.")
    common.add_argument(
        "--seed", type=int, default=None, help="Overrides QLAG_SEED and the config seed."
    )
    common.add_argument("--workers", type=int, default=None, help="Monte Carlo worker processes.")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR.")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nlclab", description="Null-Lagrangian spin-history laboratory."
    )
    parser.add_argument("--version", action="version", version=f"nlclab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("born", parents=[common], help="Outcome probability for a tilt alpha.")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=_born)

    p = sub.add_parser(
        "deviation-scan", parents=[common], help="born_probability - cos^2 on a grid."
    )
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--grid", type=int, default=90)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=_deviation_scan)

    p = sub.add_parser("mc", parents=[common], help="Monte Carlo outcome frequencies.")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--method", choices=("categorical", "cauchy_kick"), default="categorical")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=_mc)

    p = sub.add_parser("chsh", parents=[common], help="CHSH combination for four settings.")
    p.add_argument("--angles", type=_angles, default=list(CANONICAL_SETTINGS))
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--samples", type=int, default=0, help="Also sample hidden histories.")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=_chsh)

    p = sub.add_parser(
        "joint", parents=[common], help="Joint outcome table of the dual experiment."
    )
    p.add_argument("--alpha0", type=float, required=True)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=_joint)

    p = sub.add_parser(
        "nlc-check", parents=[common], help="NLC and second-order residuals of both branches."
    )
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=_nlc_check)

    p = sub.add_parser(
        "history", parents=[common], help="Export an ELE trajectory or a microhistory."
    )
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--kind", choices=("trajectory", "micro"), default="trajectory")
    p.add_argument("--branch", choices=("plus", "minus"), default="plus")
    p.add_argument("--outcome", choices=("up", "down"), default="up")
    p.add_argument("--export", type=Path, default=None)
    p.set_defaults(handler=_history)

    p = sub.add_parser(
        "special-states", parents=[common], help="Final eigenstates evolved back in time."
    )
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--at", type=float, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=_special_states)

    p = sub.add_parser(
        "hidden-history", parents=[common], help="Hidden history pair for a joint outcome."
    )
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--outcome", choices=("++", "+-", "-+", "--"), required=True)
    p.add_argument("--export", type=Path, default=None)
    p.set_defaults(handler=_hidden_history)

    p = sub.add_parser(
        "n-estimate", parents=[common], help="Rest oscillations inside a timing window."
    )
    p.add_argument("--mass-kev", type=float, default=511.0)
    p.add_argument("--window-ns", type=float, default=1.0)
    p.add_argument("--omega", type=float, default=None, help="Use this omega instead of the mass.")
    p.set_defaults(handler=_n_estimate)

    p = sub.add_parser("report", parents=[common], help="Markdown summary of one experiment.")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument(
        "--window-down", type=float, default=None, help="Down-outcome timing window in seconds."
    )
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=_report)

    return parser


# -- handlers ------------------------------------------------------------------


def _born(orch: ExperimentOrchestrator, args: argparse.Namespace) -> RunResult:
    return orch.born(args.alpha, args.gamma, args.out, args.format)


def _deviation_scan(orch: ExperimentOrchestrator, args: argparse.Namespace) -> RunResult:
    return orch.deviation_scan(args.gamma, args.grid, args.out, args.format)


def _mc(orch: ExperimentOrchestrator, args: argparse.Namespace) -> RunResult:
    return orch.mc(args.config, args.samples, orch.workers, args.method, args.out, args.format)


def _chsh(orch: ExperimentOrchestrator, args: argparse.Namespace) -> RunResult:
    return orch.chsh(args.angles, args.gamma, args.samples, orch.workers, args.out, args.format)


def _joint(orch: ExperimentOrchestrator, args: argparse.Namespace) -> RunResult:
    return orch.joint(args.alpha0, args.gamma, args.out, args.format)


def _nlc_check(orch: ExperimentOrchestrator, args: argparse.Namespace) -> RunResult:
    return orch.nlc_check(args.config, args.out, args.format)


def _history(orch: ExperimentOrchestrator, args: argparse.Namespace) -> RunResult:
    return orch.history(args.config, args.kind, args.branch, args.outcome, args.export, args.format)


def _special_states(orch: ExperimentOrchestrator, args: argparse.Namespace) -> RunResult:
    return orch.special_states(args.config, args.at, args.out, args.format)


def _hidden_history(orch: ExperimentOrchestrator, args: argparse.Namespace) -> RunResult:
    return orch.hidden_history(args.config, args.outcome, args.export, args.format)


def _n_estimate(orch: ExperimentOrchestrator, args: argparse.Namespace) -> RunResult:
    return orch.n_estimate(args.mass_kev, args.window_ns, args.omega)


def _report(orch: ExperimentOrchestrator, args: argparse.Namespace) -> RunResult:
    return orch.report(args.config, args.out, args.window_down)


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    """Flags recorded in output headers; log settings do not affect results."""

    skip = {"handler", "log_level"}
    flags: Dict[str, Any] = {}
    for key, value in vars(args).items():
        if key in skip or value is None:
            continue
        if isinstance(value, list):
            value = ",".join(repr(float(v)) for v in value)
        flags[key] = value
    return flags


# Options taking a comma list whose first entry may be negative.
_LIST_OPTIONS = ("--angles",)


def _attach_list_values(argv: Sequence[str]) -> List[str]:
    """Rewrite ``--angles -0.7,...`` as ``--angles=-0.7,...`` for argparse."""

    out: List[str] = []
    pending: Optional[str] = None
    for arg in argv:
        if pending is not None:
            out.append(f"{pending}={arg}")
            pending = None
        elif arg in _LIST_OPTIONS:
            pending = arg
        else:
            out.append(arg)
    if pending is not None:
        out.append(pending)
    return out


def run(argv: Optional[Sequence[str]] = None, settings: Optional[RunSettings] = None) -> int:
    """Parse ``argv``, run one command and return its exit status."""

    argv = sys.argv[1:] if argv is None else argv
    args = build_parser().parse_args(_attach_list_values(argv))
    settings = settings or RunSettings()
    log = get_logger(args.log_level or settings.log_level, settings.trace_file)

    orch = ExperimentOrchestrator(
        settings,
        seed=args.seed,
        workers=args.workers,
        flags=_flags(args),
        progress_callback=log.info,
    )
    try:
        result = args.handler(orch, args)
    except ConfigError as exc:
        for violation in exc.violations:
            log.error("error=ConfigError detail=%s", violation)
        return exc.exit_code
    except NlcLabError as exc:
        log.error("error=%s detail=%s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        log.error("error=%s detail=%s", type(exc).__name__, exc)
        return OutputError.exit_code

    for line in result.lines:
        print(line)
    for path in result.files:
        log.info("wrote %s", path)
    return 0


def main() -> None:
    raise SystemExit(run())
