"""Experiment orchestrator.

Coordinates each command end to end:
1. Load and validate the experiment config (when the command takes one).
2. Run the physics operations.
3. Write the result table (CSV or JSON) with its run header.
4. Return the lines to print and the files written.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from nlclab.config import ExperimentConfig, RunSettings, load_config, resolve_seed
from nlclab.errors import GridError
from nlclab.physics import born, entangle
from nlclab.physics.dynamics import (
    Branch,
    evolve_minus,
    evolve_plus,
    final_eigenbasis,
    second_order_residual,
    special_states,
)
from nlclab.physics.histories import (
    MIN_GRID,
    construct_history,
    net_phase_anomaly,
    parameterize,
    phase_uncertainty,
    special_state_frames,
)
from nlclab.physics.lagrangian import nlc_residual
from nlclab.physics.spin_algebra import eigenbasis
from nlclab.utils.files import (
    RunHeader,
    ensure_output_dirs,
    render_report,
    write_markdown_doc,
    write_table,
)


logger = logging.getLogger(__name__)

ProgressCallback = Callable[[str], None]


def _quiet(_: str) -> None:
    pass


def fmt_number(value: float) -> str:
    return f"{value:.10g}"


@dataclass
class RunResult:
    lines: List[str] = field(default_factory=list)
    files: List[Path] = field(default_factory=list)


def _amplitude_columns(n: int, prefix: str = "q") -> List[str]:
    cols: List[str] = []
    for k in range(1, n + 1):
        cols += [f"re_{prefix}{k}", f"im_{prefix}{k}"]
    return cols


def _split(values: Sequence[complex]) -> List[float]:
    out: List[float] = []
    for v in values:
        out += [float(np.real(v)), float(np.imag(v))]
    return out


class ExperimentOrchestrator:
    """Runs nlclab commands and writes their outputs under ``settings.output_dir``."""

    def __init__(
        self,
        settings: RunSettings,
        seed: Optional[int] = None,
        workers: Optional[int] = None,
        flags: Optional[Dict[str, Any]] = None,
        progress_callback: ProgressCallback = _quiet,
    ) -> None:
        self.settings = settings
        self.seed_flag = seed
        self.seed = resolve_seed(seed, settings)
        self.workers = settings.workers if workers is None else workers
        self.flags = dict(flags or {})
        self.progress = progress_callback
        self.output_root = Path(settings.output_dir)

    # -- helpers ---------------------------------------------------------------

    def _header(self, command: str, extra: Optional[Dict[str, Any]] = None) -> RunHeader:
        return RunHeader.build(command, self.seed, self.flags, extra)

    def _target(self, out: Optional[Path], command: str, fmt: str) -> Path:
        if out is not None:
            return Path(out)
        dirs = ensure_output_dirs(self.output_root)
        return dirs["tables"] / f"{command}.{fmt}"

    def _write(
        self,
        result: RunResult,
        command: str,
        out: Optional[Path],
        fmt: str,
        columns: Sequence[str],
        rows: Sequence[Sequence[Any]],
        extra: Optional[Dict[str, Any]] = None,
    ) -> None:
        path = self._target(out, command, fmt)
        self.progress(f"Writing {path}...")
        result.files.append(write_table(path, self._header(command, extra), columns, rows, fmt))

    @property
    def explicit_seed(self) -> Optional[int]:
        """The seed from --seed or QLAG_SEED, if either was given."""

        if self.seed_flag is None and self.settings.seed is None:
            return None
        return self.seed

    def _load(self, path: Path) -> ExperimentConfig:
        self.progress(f"Loading config {path}...")
        cfg = load_config(path)
        self.seed = resolve_seed(self.seed_flag, self.settings, cfg.seed)
        return cfg

    # -- born module -----------------------------------------------------------

    def born(
        self, alpha: float, gamma: float, out: Optional[Path] = None, fmt: str = "csv"
    ) -> RunResult:
        p = born.born_probability(alpha, gamma)
        ratio = born.outcome_ratio(born.fold_alpha(alpha), gamma)
        result = RunResult([fmt_number(p)])
        if out is not None:
            rows = [(alpha, gamma, ratio, p, math.cos(alpha) ** 2)]
            columns = ("alpha", "gamma_s", "ratio", "born_probability", "cos2")
            self._write(result, "born", out, fmt, columns, rows)
        return result

    def deviation_scan(
        self, gamma: float, grid: int, out: Optional[Path] = None, fmt: str = "csv"
    ) -> RunResult:
        self.progress(f"Scanning {grid - 1} tilt angles...")
        rows = born.deviation_scan(born.scan_grid(grid), gamma)
        worst = born.largest_deviation(rows)
        result = RunResult(
            [
                f"max |difference| = {fmt_number(abs(worst.difference))}"
                f" at alpha = {fmt_number(worst.alpha)}"
            ]
        )
        self._write(
            result,
            "deviation-scan",
            out,
            fmt,
            ("alpha", "born_probability", "cos2", "difference"),
            [tuple(r) for r in rows],
        )
        return result

    def mc(
        self,
        config_path: Path,
        samples: int,
        workers: int = 1,
        method: str = "categorical",
        out: Optional[Path] = None,
        fmt: str = "csv",
    ) -> RunResult:
        cfg = self._load(config_path)
        if cfg.erased:
            dist = born.eraser_outcomes(cfg, samples, self.seed)
            endpoint = dist.endpoint.amps
            rows = [
                ("no-collapse", k + 1, float(v.real), float(v.imag))
                for k, v in enumerate(endpoint)
            ]
            result = RunResult(["no-collapse"])
            self._write(result, "mc", out, fmt, ("label", "component", "re", "im"), rows)
            return result

        self.progress(f"Sampling {samples} histories on {workers} worker(s)...")
        dist = born.monte_carlo_outcomes(cfg, samples, self.seed, workers=workers, method=method)
        up = dist.metadata["analytic_up"]
        analytic = (up, 1.0 - up)
        rows = [
            (label, count, prob, analytic[k])
            for k, (label, count, prob) in enumerate(zip(dist.labels, dist.counts, dist.probs))
        ]
        result = RunResult(
            [f"{label} {fmt_number(prob)}" for label, prob in zip(dist.labels, dist.probs)]
        )
        self._write(
            result,
            "mc",
            out,
            fmt,
            ("label", "count", "frequency", "analytic"),
            rows,
            {"alpha": fmt_number(dist.metadata["alpha"]), "sampler": method},
        )
        return result

    def n_estimate(
        self,
        mass_kev: float = 511.0,
        window_ns: float = 1.0,
        omega: Optional[float] = None,
    ) -> RunResult:
        omega = born.rest_frequency(mass_kev) if omega is None else omega
        n = born.periodicity_multiplier(omega, window_ns * 1e-9)
        return RunResult([f"{n:.6e}"])

    # -- entangle module -------------------------------------------------------

    def chsh(
        self,
        angles: Sequence[float],
        gamma: float,
        samples: int = 0,
        workers: int = 1,
        out: Optional[Path] = None,
        fmt: str = "csv",
    ) -> RunResult:
        value = entangle.chsh(angles, gamma)
        result = RunResult([fmt_number(value)])
        sampled: List[Any] = ["", "", "", ""]
        if samples > 0:
            self.progress(f"Sampling {samples} hidden histories per setting pair...")
            sampled = entangle.sampled_correlations(
                angles, gamma, samples, self.seed, workers=workers
            )
            result.lines.append(f"sampled {fmt_number(entangle.chsh_combination(sampled))}")
        if out is not None:
            names = ("a,b", "a,b'", "a',b", "a',b'")
            rows = [
                (names[k], x, y, entangle.correlation((x - y) / 2.0, gamma), sampled[k])
                for k, (x, y) in enumerate(entangle.setting_pairs(angles))
            ]
            columns = ("pair", "left_setting", "right_setting", "E", "E_sampled")
            self._write(result, "chsh", out, fmt, columns, rows)
        return result

    def joint(
        self, alpha0: float, gamma: float, out: Optional[Path] = None, fmt: str = "csv"
    ) -> RunResult:
        exp = entangle.DualExperiment.for_alpha0(alpha0, gamma)
        outcomes = entangle.joint_probabilities(exp)
        corr = entangle.correlation(exp.alpha0, gamma)
        result = RunResult([f"E = {fmt_number(corr)}"])
        extra: Optional[Dict[str, str]] = None
        if gamma > 0:
            extra = {"model": "finite gamma_s applies born_probability per side (extrapolation)"}
        self._write(
            result,
            "joint",
            out,
            fmt,
            ("left", "right", "probability"),
            [(o.left, o.right, o.prob) for o in outcomes],
            extra,
        )
        return result

    def hidden_history(
        self,
        config_path: Path,
        outcome: str,
        export: Optional[Path] = None,
        fmt: str = "csv",
    ) -> RunResult:
        cfg = self._load(config_path)
        exp = entangle.dualize(cfg)
        target = entangle.JointOutcome.parse(outcome)
        self.progress(f"Constructing hidden history for outcome {outcome}...")
        pair = entangle.hidden_history(exp, target, self.explicit_seed)
        m3 = entangle.check_m3(pair.left, pair.right, exp.omega)
        nlc_left = nlc_residual(exp.left_context(), pair.left)
        nlc_right = nlc_residual(exp.right_context(), pair.right)
        result = RunResult(
            [
                f"alpha_a = {fmt_number(pair.alpha_a)}",
                f"m3 {'pass' if m3.passed else 'fail'} state={m3.state_residual:.3e}"
                f" derivative={m3.derivative_residual:.3e}",
                f"nlc left={nlc_left:.3e} right={nlc_right:.3e}",
            ]
        )
        n = pair.left.n
        columns = ["particle", "t", "A", "alpha", "theta"] + _amplitude_columns(n - 1, "c")
        rows = []
        for tag, history in (("L", pair.left), ("R", pair.right)):
            theta = history.theta
            for k, t in enumerate(history.times):
                rows.append(
                    (tag, float(t), float(history.a[k]), float(history.alpha[k]), float(theta[k]))
                    + tuple(_split(history.c[k]))
                )
        extra = {"alpha_a": fmt_number(pair.alpha_a)}
        self._write(result, "hidden-history", export, fmt, columns, rows, extra)
        return result

    # -- dynamics and histories ------------------------------------------------

    def nlc_check(
        self, config_path: Path, out: Optional[Path] = None, fmt: str = "csv"
    ) -> RunResult:
        cfg = self._load(config_path)
        ctx = cfg.lagrangian_context()
        prep = born.prepared_vector(cfg, ctx.ops)
        t0, t1 = cfg.preparation.time, cfg.measurement.time
        self.progress("Integrating both branches...")
        plus = evolve_plus(ctx, prep, t0, t1, cfg.steps)
        minus = evolve_minus(ctx, prep, t0, t1, cfg.steps)
        values = {
            "nlc_plus": nlc_residual(ctx, plus),
            "nlc_minus": nlc_residual(ctx, minus),
            "second_order_plus": second_order_residual(ctx, plus),
            "second_order_minus": second_order_residual(ctx, minus),
            "norm_drift_plus": float(np.max(np.abs(plus.norms() - prep.norm2))),
            "norm_drift_minus": float(np.max(np.abs(minus.norms() - prep.norm2))),
        }
        result = RunResult([f"{k} {v:.3e}" for k, v in values.items()])
        if out is not None:
            self._write(result, "nlc-check", out, fmt, ("quantity", "value"), list(values.items()))
        return result

    def history(
        self,
        config_path: Path,
        kind: str = "trajectory",
        branch: str = "plus",
        outcome: str = "up",
        export: Optional[Path] = None,
        fmt: str = "csv",
    ) -> RunResult:
        cfg = self._load(config_path)
        ctx = cfg.lagrangian_context()
        prep = born.prepared_vector(cfg, ctx.ops)
        t0, t1 = cfg.preparation.time, cfg.measurement.time
        evolve = evolve_plus if branch == "plus" else evolve_minus
        traj = evolve(ctx, prep, t0, t1, cfg.steps)

        if kind == "trajectory":
            states = traj.states()
            columns = ["t"] + _amplitude_columns(ctx.n) + ["branch"]
            rows = [
                (float(t),) + tuple(_split(states[k])) + (traj.branch.value,)
                for k, t in enumerate(traj.times)
            ]
            result = RunResult([f"{traj.times.size} samples, branch {traj.branch.value}"])
            self._write(result, "history", export, fmt, columns, rows)
            return result

        if traj.times.size < MIN_GRID:
            raise GridError(f"micro-history export needs steps >= {MIN_GRID - 1}")
        if traj.branch is not Branch.PLUS:
            traj = evolve_plus(ctx, prep, t0, t1, cfg.steps)
        _, meas_basis = eigenbasis(ctx.ops, cfg.measurement.axis)
        frames = special_state_frames(ctx, traj.times, meas_basis)
        ele = parameterize(traj, frames)
        alpha_start = float(ele.alpha[0])
        alpha_a = born.choose_target(
            alpha_start, outcome == "up", cfg.anomaly.gamma_s, cfg.l_max, self.explicit_seed
        )
        alpha_end = alpha_start + alpha_a
        self.progress(f"Constructing anomaly history alpha {alpha_start:.6g} -> {alpha_end:.6g}...")
        history = construct_history(
            ctx,
            cfg.anomaly_params(),
            alpha_start,
            alpha_start + alpha_a,
            traj.times.size,
            t_start=t0,
            times=traj.times,
            c=ele.c[0],
            theta_start=float(ele.theta_offset[0]),
            stationary_basis=meas_basis,
        )
        theta = history.theta
        columns = ["t", "A", "alpha", "theta"] + _amplitude_columns(ctx.n - 1, "c")
        rows = [
            (float(t), float(history.a[k]), float(history.alpha[k]), float(theta[k]))
            + tuple(_split(history.c[k]))
            for k, t in enumerate(history.times)
        ]
        residual = nlc_residual(ctx, history)
        result = RunResult([f"alpha_a = {fmt_number(alpha_a)}", f"nlc {residual:.3e}"])
        self._write(result, "history", export, fmt, columns, rows, {"alpha_a": fmt_number(alpha_a)})
        return result

    def special_states(
        self, config_path: Path, at: float, out: Optional[Path] = None, fmt: str = "csv"
    ) -> RunResult:
        cfg = self._load(config_path)
        ctx = cfg.lagrangian_context()
        t_f = cfg.measurement.time
        self.progress(f"Evolving final eigenstates back to t={at}...")
        states = special_states(ctx, t_f, at, cfg.steps)
        energies, _ = final_eigenbasis(ctx, t_f)
        columns = ["index", "energy"] + _amplitude_columns(ctx.n)
        rows = [
            (j, float(energies[j])) + tuple(_split(traj.start.amps))
            for j, traj in enumerate(states)
        ]
        result = RunResult([f"{len(states)} special states at t={fmt_number(at)}"])
        self._write(result, "special-states", out, fmt, columns, rows)
        return result

    # -- report ----------------------------------------------------------------

    def report(
        self, config_path: Path, out: Optional[Path] = None, window_down: Optional[float] = None
    ) -> RunResult:
        """Markdown summary; ``window_down`` is the down-outcome timing window."""

        cfg = self._load(config_path)
        ctx = cfg.lagrangian_context()
        prepared = born.preparation_alpha(cfg)
        if cfg.extra_measurements:
            dist = born.two_stage_outcomes(cfg)
            limit = born.remeasure(dist.endpoint, ctx.ops, cfg.extra_measurements[0].axis, 0.0)
        else:
            dist = born.outcome_distribution(cfg)
            limit = born.state_distribution(
                prepared.endpoint, prepared.basis, prepared.m_values, 0.0
            )
        prep = born.prepared_vector(cfg, ctx.ops)
        plus = evolve_plus(ctx, prep, cfg.preparation.time, cfg.measurement.time, cfg.steps)
        minus = evolve_minus(ctx, prep, cfg.preparation.time, cfg.measurement.time, cfg.steps)
        params = cfg.anomaly_params()
        alpha_a = born.choose_target(prepared.alpha, dist.probs[0] >= 0.5, cfg.anomaly.gamma_s)
        endpoint = None
        if cfg.erased:
            endpoint = ", ".join(f"{v.real:.6g}{v.imag:+.6g}j" for v in prepared.endpoint.amps)
        delta_t = cfg.measurement.delta_t
        window_down = delta_t if window_down is None else window_down
        windowed = born.windowed_outcome_ratio(
            prepared.alpha, cfg.anomaly.gamma_s, delta_t, window_down
        )
        penalty = born.large_anomaly_penalty(alpha_a, params) if alpha_a != 0.0 else None
        text = render_report(
            seed=self.seed,
            flags=self._header("report").flag_string(),
            config_path=str(config_path),
            cfg=cfg,
            alpha=prepared.alpha,
            outcomes=[
                {"label": label, "prob": p, "limit": q}
                for label, p, q in zip(dist.labels, dist.probs, limit.probs)
            ],
            endpoint=endpoint,
            nlc_plus=nlc_residual(ctx, plus),
            nlc_minus=nlc_residual(ctx, minus),
            second_order=second_order_residual(ctx, plus),
            n_periods=born.periodicity_multiplier(cfg.omega, cfg.measurement.delta_t),
            net_anomaly=net_phase_anomaly(alpha_a, params),
            phase_spread=phase_uncertainty(alpha_a, params),
            penalty=penalty,
            windows=(delta_t, window_down),
            windowed_ratio=windowed,
        )
        if out is None:
            reports = ensure_output_dirs(self.output_root)["reports"]
            path = write_markdown_doc(reports, "report.md", text)
        else:
            path = write_markdown_doc(Path(out).parent, Path(out).name, text)
        return RunResult([str(path)], [path])
