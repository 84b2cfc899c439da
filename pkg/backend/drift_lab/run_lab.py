"""
Experiment harness - runs named studies from a YAML config or a built-in preset
and writes per-study CSV tables, manifest.json and a rendered summary.

    python -m drift_lab.run_lab run gaussian-baseline
    python -m drift_lab.run_lab presets
    python -m drift_lab.run_lab fields singular-vortex-3d --out fields/
    python -m drift_lab.run_lab kernel cellular-vortex --t 0.1 --y 64 64
    python -m drift_lab.run_lab sde gaussian-baseline
    python -m drift_lab.run_lab report results/gaussian-baseline

Exit codes: 0 all criteria pass, 1 criteria failure, 2 validation error.
"""

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
import yaml
from tabulate import tabulate
from tqdm import tqdm

from . import __version__
from .components.aronson import near_field_exponent
from .components.field_toolkit import divergence, lebesgue_norm
from .components.kernel_lab import DIRECTIONS, estimate_kernel
from .components.taylor_mc import histogram_table, simulate, write_endpoints
from .core.config import PRESETS, ExperimentConfig, preset, resolve_config
from .core.dfsl import save_scalar, save_vector
from .core.errors import LabError, ValidationError
from .core.tables import read_config_hash, read_table, write_table
from .studies import LabContext, StudyOutcome, mc_config, run_study

logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_INVALID = 2


def render_summary(summary: pd.DataFrame) -> str:
    return tabulate(summary, headers="keys", tablefmt="github", showindex=False)


class ExperimentRunner:
    """Run the studies of one config and write its report"""

    def __init__(
        self,
        config: ExperimentConfig,
        config_hash: str,
        output_dir: Optional[str] = None,
        workers: Optional[int] = None,
        source: str = "",
    ):
        """
        Initialize the runner.

        Args:
            config: Validated experiment config
            config_hash: SHA-256 of the config bytes, stamped on every table
            output_dir: Overrides the config's output directory
            workers: Thread pool size for families and path blocks
            source: Preset name or config path, recorded in the manifest
        """
        self.config = config
        self.config_hash = config_hash
        self.output_dir = Path(output_dir) if output_dir else config.output_dir
        self.workers = workers
        self.source = source
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def prepare(self) -> LabContext:
        """Build coefficients, the mollification ladder and the operators"""
        cfg = self.config
        grid = cfg.grid_spec
        print(f"\n📦 Building {cfg.field.kind} drift on {grid.points_per_axis}^{grid.n}, box {grid.box_length}")
        ctx = LabContext.from_config(cfg, workers=self.workers)
        print(f"✅ Ladder of {len(ctx.family)} members, eps = "
              + ", ".join(f"{eps:g}" for eps in ctx.epsilons))
        if grid.exploratory:
            print(f"⚠️  n = {grid.n}: exploratory run, the estimates checked here assume n >= 3")
        if cfg.output.write_fields:
            save_vector(self.output_dir / "field.dfsl", ctx.b)
        return ctx

    def run_studies(self, ctx: LabContext) -> List[StudyOutcome]:
        """Run every configured study in declared order; a failure never stops the rest"""
        outcomes = []
        for name in tqdm(self.config.studies.run, desc="Studies"):
            print(f"\n🔬 Study: {name}")
            outcome = run_study(name, ctx)
            write_table(outcome.table, self.output_dir / f"{name}.csv", self.config_hash)
            mark = "⚠️ " if outcome.skipped else ("✅" if outcome.passed else "❌")
            print(f"{mark} {name}: {outcome.detail} ({outcome.runtime:.1f}s)")
            outcomes.append(outcome)
        return outcomes

    def write_report(self, outcomes: List[StudyOutcome], started: datetime, finished: datetime) -> pd.DataFrame:
        summary = pd.DataFrame([{
            "study": o.name,
            "status": "SKIP" if o.skipped else ("PASS" if o.passed else "FAIL"),
            "detail": o.detail,
        } for o in outcomes])
        write_table(summary, self.output_dir / "summary.csv", self.config_hash)
        (self.output_dir / "summary.txt").write_text(render_summary(summary) + "\n", encoding="utf-8")
        manifest = {
            "config_hash": self.config_hash,
            "code_version": __version__,
            "source": self.source,
            "name": self.config.meta.name,
            "started": started.isoformat(),
            "finished": finished.isoformat(),
            "exploratory": self.config.grid_spec.exploratory,
            "studies": [{"name": o.name, "passed": o.passed, "skipped": o.skipped,
                         "runtime_seconds": round(o.runtime, 3)} for o in outcomes],
        }
        with open(self.output_dir / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2)
        with open(self.output_dir / "config.yaml", "w", encoding="utf-8") as f:
            yaml.safe_dump(self.config.to_dict(), f, sort_keys=True)
        return summary

    def run(self) -> int:
        """
        Run the complete pipeline.

        Returns:
            Exit code: 0 when every study passes, 1 otherwise
        """
        print("=" * 60)
        print(f"🚀 drift_lab: {self.config.meta.name}")
        print("=" * 60)
        started = datetime.now(timezone.utc)

        # Step 1: Coefficients and operators
        ctx = self.prepare()

        # Step 2: Studies
        outcomes = self.run_studies(ctx)

        # Step 3: Report
        summary = self.write_report(outcomes, started, datetime.now(timezone.utc))

        failed = [o.name for o in outcomes if not o.passed]
        print("\n" + "=" * 60)
        print("✅ All studies passed" if not failed else f"❌ Failed: {', '.join(failed)}")
        print("=" * 60)
        print(render_summary(summary))
        print(f"\n📁 Output directory: {self.output_dir}")
        return EXIT_FAIL if failed else EXIT_PASS


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg, digest = resolve_config(args.config)
    runner = ExperimentRunner(cfg, digest, output_dir=args.output, workers=args.workers, source=args.config)
    return runner.run()


def cmd_presets(args) -> int:
    rows = []
    for name in PRESETS:
        cfg, digest = preset(name)
        rows.append({"name": name, "n": cfg.grid.n, "points": cfg.grid.points, "field": cfg.field.kind,
                     "studies": len(cfg.studies.run), "hash": digest[:12], "description": cfg.meta.description})
        if args.write:
            target = Path(args.write) / f"{name}.yaml"
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(yaml.safe_dump(PRESETS[name], sort_keys=True), encoding="utf-8")
    print(tabulate(rows, headers="keys", tablefmt="github"))
    if args.write:
        print(f"\n✅ Wrote {len(rows)} preset files to {args.write}")
    return EXIT_PASS


def cmd_fields(args) -> int:
    """Target drift and its mollification ladder as DFSL files plus a norms table"""
    cfg, digest = resolve_config(args.config)
    out = Path(args.out)
    print(f"📦 Building {cfg.field.kind} drift and {cfg.ladder.halvings + 1} mollified members")
    ctx = LabContext.from_config(cfg, workers=args.workers)
    save_vector(out / "field.dfsl", ctx.b)
    rows = []
    members = [("target", float("nan"), ctx.b)] + [("ladder", eps, bk) for eps, bk in ctx.ladder]
    for k, (label, eps, b) in enumerate(members):
        if label == "ladder":
            save_vector(out / f"field_eps{k - 1}.dfsl", b)
        rows.append({
            "member": label, "k": k - 1, "epsilon": eps, "max_abs": b.max_magnitude,
            "l2": lebesgue_norm(b, 2.0), "lq": lebesgue_norm(b, cfg.field.target_q),
            "max_divergence": float(np.abs(divergence(b).values).max()),
        })
    write_table(pd.DataFrame(rows), out / "fields.csv", digest)
    print(f"✅ Wrote {len(ctx.ladder) + 1} fields to {out}")
    return EXIT_PASS


def cmd_kernel(args) -> int:
    cfg, digest = resolve_config(args.config)
    ctx = LabContext.from_config(cfg, workers=args.workers)
    y = tuple(args.y) if args.y else ctx.source
    if len(y) != ctx.grid.n:
        raise ValidationError(f"--y needs {ctx.grid.n} indices")
    print(f"🔬 Kernel slice t={args.t}, y={y}, {args.direction}")
    kslice = estimate_kernel(ctx.op, args.t, y, direction=args.direction, dt=cfg.scheme.dt, theta=cfg.scheme.theta)
    out = Path(args.out or cfg.output_dir)
    save_scalar(out / f"kernel_{args.direction}_t{args.t:g}.dfsl", kslice.values)
    row = {
        "t": kslice.t, "y_index": "-".join(str(i) for i in kslice.source), "direction": kslice.direction,
        "mass": kslice.mass, "peak": kslice.peak, "min_relative": kslice.min_relative,
        "near_exponent": near_field_exponent(kslice),
        "on_diagonal_scaled": float(kslice.values.values[kslice.source]) * kslice.t ** (ctx.grid.n / 2.0),
    }
    write_table(pd.DataFrame([row]), out / f"kernel_{args.direction}_t{args.t:g}.csv", digest)
    print(f"✅ mass={kslice.mass:.12f}, peak={kslice.peak:.6g}")
    return EXIT_PASS


def cmd_sde(args) -> int:
    cfg, digest = resolve_config(args.config)
    ctx = LabContext.from_config(cfg, workers=args.workers)
    if not ctx.a.is_identity:
        raise ValidationError("path simulation needs a = I")
    mc = mc_config(ctx)
    print(f"🎲 Simulating {mc.N} paths, {mc.steps} steps, seed {mc.seed}")
    sample = simulate(ctx.b, mc)
    out = Path(args.out or cfg.output_dir)
    write_endpoints(sample, out / "endpoints.csv", digest)
    kslice = ctx.kernel(mc.T) if args.compare else None
    write_table(histogram_table(sample, cfg.mc.bins_per_axis, kslice), out / "histogram.csv", digest)
    print(f"✅ exit fraction {sample.exited.mean():.4f}; wrote endpoints.csv and histogram.csv to {out}")
    return EXIT_PASS


def cmd_report(args) -> int:
    directory = Path(args.directory)
    path = directory / "summary.csv"
    if not path.exists():
        raise ValidationError(f"no summary.csv in {directory}")
    summary = read_table(path)
    text = render_summary(summary)
    (directory / "summary.txt").write_text(text + "\n", encoding="utf-8")
    print(f"config_hash={read_config_hash(path)}")
    print(text)
    return EXIT_PASS if (summary["status"] != "FAIL").all() else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="drift_lab experiment harness")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--workers", type=int, default=None, help="Thread pool size (default DRIFT_LAB_WORKERS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="Run the studies of a config")
    p.add_argument("config", help="Preset name or YAML path")
    p.add_argument("--output", default=None, help="Output directory")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("presets", help="List built-in configs")
    p.add_argument("--write", default=None, help="Also write them as YAML files into this directory")
    p.set_defaults(handler=cmd_presets)

    p = sub.add_parser("fields", help="Write the drift and its mollification ladder")
    p.add_argument("config", help="Preset name or YAML path")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(handler=cmd_fields)

    p = sub.add_parser("kernel", help="Estimate one kernel slice")
    p.add_argument("config", help="Preset name or YAML path")
    p.add_argument("--t", type=float, required=True, help="Time")
    p.add_argument("--y", type=int, nargs="+", default=None, help="Source node index (default: config source)")
    p.add_argument("--direction", choices=DIRECTIONS, default="forward")
    p.add_argument("--out", default=None, help="Output directory")
    p.set_defaults(handler=cmd_kernel)

    p = sub.add_parser("sde", help="Simulate Taylor's diffusion")
    p.add_argument("config", help="Preset name or YAML path")
    p.add_argument("--out", default=None, help="Output directory")
    p.add_argument("--compare", action="store_true", help="Add PDE bin masses to histogram.csv")
    p.set_defaults(handler=cmd_sde)

    p = sub.add_parser("report", help="Re-render summary.txt from summary.csv")
    p.add_argument("directory", help="Output directory of a run")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        return args.handler(args)
    except ValidationError as e:
        print(f"❌ Invalid input: {e}")
        return EXIT_INVALID
    except LabError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
