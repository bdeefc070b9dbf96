"""
Command Line Interface Module

Entry point of the marmamba toolkit. Parses the command line, resolves the
run configuration (defaults, then --config file, then flags and --set
overrides) and hands the command to the run orchestrator.

Commands:
- synth      generate a synthetic CT metal-artifact dataset
- train      progressive-resolution training of the restoration network
- eval       PSNR/SSIM/RMSE/perceptual scores per image and per size group
- infer      restore one image, optionally with metal excision
- analyze    directional branch spectra, feature energy and HU renders
- gradcheck  full-network gradient check against finite differences
- selftest   the invariant suite

Exit codes:
    0   success
    1   contract error (bad input, bad configuration, failed check)
    2   numeric error (non-finite values, failed gradient check)
    64  usage error

Usage:
    marmamba synth --count 16 --size 128 --run-dir runs/data
    marmamba train --data runs/data/dataset --run-dir runs/train
    marmamba eval --data runs/data/dataset --checkpoint runs/train/checkpoints/iter_00000750
    python main.py selftest --quick
"""

import argparse
import sys
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

try:
    from rich.console import Console
    from rich.table import Table
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False

from .. import __version__
from ..config.constants import PAPER_SCHEDULE
from ..config.settings import RunConfig, parse_override
from ..core.orchestrator import RunOrchestrator, RunResult
from ..core.trainer import parse_phases
from ..utils.errors import ConfigurationError, ConfigurationValidationError, MarError, exit_code_for
from ..utils.logger import get_logger, shutdown_logging

EXIT_USAGE = 64


class UsageError(Exception):
    """Raised by the parser instead of exiting, carrying the usage text."""

    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class MarArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors to the caller."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message, self.format_usage())


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _float_pair(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got '{text}'")
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got '{text}'")
    return values


def _phase_list(text: str) -> List[List[int]]:
    try:
        return [[p.image_size, p.batch_size, p.iterations] for p in parse_phases(text)]
    except ConfigurationError as e:
        raise argparse.ArgumentTypeError(str(e))


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> MarArgumentParser:
    common = MarArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--run-dir", help="output directory (default runs/<command>_<timestamp>)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="worker cap for synth and eval")
    common.add_argument("--force", action="store_true", help="reuse a non-empty run directory")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any configuration key (repeatable)")

    parser = MarArgumentParser(prog="marmamba",
                               description="CT metal-artifact reduction with directional state-space blocks")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    synth = commands.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    synth.add_argument("--count", type=int)
    synth.add_argument("--size", type=int, help="image grid n")
    synth.add_argument("--out", help="dataset directory (relative paths live in the run directory)")
    synth.add_argument("--size-mix", help="comma-separated groups from large,medium,small,tiny")
    synth.add_argument("--angles", type=int, help="projection angles over 180 degrees")
    synth.add_argument("--metal-count", type=int, help="metal objects per sample")
    synth.add_argument("--export-pgm", action="store_true", help="also write 8-bit PGM previews")

    train = commands.add_parser("train", parents=[common], help="train the restoration network")
    train.add_argument("--data", required=True, help="dataset directory with manifest.json")
    schedule = train.add_mutually_exclusive_group()
    schedule.add_argument("--paper-schedule", action="store_true",
                          help="phases (256,8,100000),(336,4,200000),(416,2,20000); "
                               "lr 2e-4 over a 1000-step period")
    schedule.add_argument("--phases", type=_phase_list, help="SIZExBATCHxITERS,... e.g. 32x4x300,48x2x300")
    train.add_argument("--fmb-branches", help="subset of n, h, v")
    train.add_argument("--amb-pool", help="subset of a, m")
    train.add_argument("--loss", choices=["phuber", "lpips", "both"])
    train.add_argument("--base-channels", type=int)
    train.add_argument("--stage-blocks", type=_int_list, help="eight comma-separated block counts")
    train.add_argument("--checkpoint-every", type=int)
    train.add_argument("--precision", choices=["float32", "float64"])
    train.add_argument("--resume", help="checkpoint directory to continue from")

    evaluate = commands.add_parser("eval", parents=[common], help="score a checkpoint or the input baseline")
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--checkpoint", help="omit to score the unprocessed inputs")
    evaluate.add_argument("--dilation", type=int, help="metal mask dilation in pixels")
    evaluate.add_argument("--limit", type=int, help="score only the first N samples")

    infer = commands.add_parser("infer", parents=[common], help="restore one image")
    infer.add_argument("--checkpoint", required=True)
    infer.add_argument("--input", required=True, help=".mart, .png or .pgm image")
    infer.add_argument("--output", help="restored .mart path (default restored.mart)")
    infer.add_argument("--real-mode", action="store_true", default=None, help="excise and reinsert metal")
    infer.add_argument("--tau", type=float, help="metal threshold for --real-mode")

    analyze = commands.add_parser("analyze", parents=[common], help="directional and feature analysis")
    analyze.add_argument("--checkpoint")
    analyze.add_argument("--input", help="image to analyze (default: a synthesized sample)")
    analyze.add_argument("--gt", help="ground truth for the error map")
    analyze.add_argument("--block", help="analyzed MS-Mamba block, e.g. enc2.0")
    analyze.add_argument("--bins", type=int)
    analyze.add_argument("--annulus", type=_float_pair, help="r_lo,r_hi as fractions of Nyquist")
    analyze.add_argument("--profile-sizes", type=_int_list, help="also profile at these sizes")

    gradcheck = commands.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    gradcheck.add_argument("--inject-fault", metavar="OP", help="corrupt one backward rule; expect detection")
    gradcheck.add_argument("--cap", type=int,
                           help="total coordinates to sample (default: all up to 2000 scalars, else 5%% per tensor)")

    selftest = commands.add_parser("selftest", parents=[common], help="run the invariant suite")
    selftest.add_argument("--checkpoint", help="also check the blocks of a trained network")
    selftest.add_argument("--quick", action="store_true")
    return parser


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Configuration keys set by dedicated flags, in precedence order."""
    flag_keys = {
        "seed": "runtime.seed",
        "threads": "runtime.threads",
        "log_level": "logging.level",
        "count": "synth.count",
        "size": "synth.size",
        "angles": "synth.n_angles",
        "metal_count": "synth.metal_count",
        "phases": "phases.list",
        "fmb_branches": "net.branches",
        "amb_pool": "net.pools",
        "loss": "loss.mode",
        "base_channels": "net.base_channels",
        "stage_blocks": "net.stage_blocks",
        "checkpoint_every": "train.checkpoint_every",
        "precision": "train.precision",
        "dilation": "eval.dilation",
        "limit": "eval.limit",
        "block": "analysis.block",
        "bins": "analysis.bins",
        "annulus": "analysis.annulus",
        "profile_sizes": "analysis.profile_sizes",
    }
    overrides = {key: getattr(args, flag) for flag, key in flag_keys.items()
                 if getattr(args, flag, None) is not None}
    if getattr(args, "size_mix", None):
        overrides["synth.size_mix"] = [g.strip() for g in args.size_mix.split(",") if g.strip()]
    if getattr(args, "export_pgm", False):
        overrides["synth.export_pgm"] = True
    if getattr(args, "paper_schedule", False):
        overrides["phases.preset"] = "paper"
        overrides.update({f"schedule.{key}": value for key, value in PAPER_SCHEDULE.items()})
    return overrides


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the --config file, then dedicated flags, then --set."""
    overrides = config_overrides(args)
    overrides.update(parse_override(item) for item in args.overrides)
    return RunConfig(args.config, overrides)


def command_options(args: argparse.Namespace) -> Dict[str, Any]:
    """Keyword arguments of the orchestrator command."""
    command = args.command
    if command == "synth":
        return {"out": args.out}
    if command == "train":
        return {"data": args.data, "resume": args.resume}
    if command == "eval":
        return {"data": args.data, "checkpoint": args.checkpoint}
    if command == "infer":
        return {"checkpoint": args.checkpoint, "input": args.input, "output": args.output,
                "real_mode": args.real_mode, "tau": args.tau}
    if command == "analyze":
        return {"checkpoint": args.checkpoint, "input": args.input, "gt": args.gt,
                "profile": args.profile_sizes is not None}
    if command == "gradcheck":
        return {"inject_fault": args.inject_fault, "cap": args.cap}
    return {"checkpoint": args.checkpoint, "quick": args.quick}


# =============================================================================
# CLI
# =============================================================================

class MarMambaCLI:
    """Runs one command line and turns the outcome into an exit code."""

    def __init__(self, console: Optional["Console"] = None):
        self.use_rich = RICH_AVAILABLE
        self.console = console or (Console() if self.use_rich else None)
        self.logger = get_logger(__name__)

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        argv = list(sys.argv[1:] if argv is None else argv)
        try:
            args = build_parser().parse_args(argv)
        except UsageError as e:
            self._print(e.usage.rstrip())
            self._print_error(f"marmamba: error: {e}")
            return EXIT_USAGE

        try:
            config = resolve_config(args)
            run_dir = args.run_dir or f"runs/{args.command}_{datetime.now():%Y%m%d_%H%M%S}"
            orchestrator = RunOrchestrator(config, run_dir, force=args.force, argv=argv)
            result = orchestrator.run(args.command, **command_options(args))
            self._show_result(result)
            return 0
        except ConfigurationValidationError as e:
            self._print_error(f"Invalid configuration: {e.message}")
            for message in e.errors:
                self._print_error(f"  - {message}")
            return exit_code_for(e)
        except MarError as e:
            self.logger.error(f"{args.command} failed", exception=e)
            self._print_error(f"{args.command} failed: {e}")
            return exit_code_for(e)
        except KeyboardInterrupt:
            self._print_error("Interrupted")
            return 1
        except Exception as e:
            self.logger.error(f"Unexpected error in {args.command}", exception=e)
            self._print_error(f"Unexpected error: {e}")
            return exit_code_for(e)
        finally:
            shutdown_logging()

    def _show_result(self, result: RunResult) -> None:
        if "selftest" in result.tables:
            self._show_table(f"marmamba {result.command}", result.tables["selftest"].to_dict("records"))
        rows = [{"item": k, "value": v} for k, v in result.outputs.items() if v]
        rows += [{"item": k, "value": v} for k, v in result.summary.items()]
        self._show_table(f"{result.command} finished in {result.duration:.1f}s ({result.run_dir})", rows)

    def _show_table(self, title: str, rows: List[Dict[str, Any]]) -> None:
        if not rows:
            return
        if self.use_rich:
            table = Table(title=title)
            for column in rows[0]:
                table.add_column(str(column), overflow="fold")
            for row in rows:
                table.add_row(*(str(v) for v in row.values()))
            self.console.print(table)
        else:
            print(title)
            for row in rows:
                print("  " + "  ".join(str(v) for v in row.values()))

    def _print(self, message: str) -> None:
        if self.use_rich:
            self.console.print(message, markup=False, highlight=False)
        else:
            print(message)

    def _print_error(self, message: str) -> None:
        if self.use_rich:
            self.console.print(f"[red]{_escape(message)}[/red]")
        else:
            print(f"ERROR: {message}", file=sys.stderr)


def _escape(text: str) -> str:
    return text.replace("[", "\\[")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Console-script entry point."""
    return MarMambaCLI().run(argv)


if __name__ == "__main__":
    sys.exit(main())
