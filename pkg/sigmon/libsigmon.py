import argparse
import logging
import pathlib
import sys

from sigmon.base import SigmonError
from sigmon.commands import cmd_emit_plots, cmd_eval, cmd_infer, cmd_synth, cmd_train


_LOG = logging.getLogger('sigmon')


argparser = argparse.ArgumentParser(description="Signal-based Bayesian seismic monitoring")
argparser.add_argument('--verbose', '-v', action='store_true')

argsubparsers = argparser.add_subparsers(title='Commands', dest='command')
argsubparsers.required = True


def _common(parser: argparse.ArgumentParser) -> argparse.ArgumentParser:
    parser.add_argument("--config",
                        type=pathlib.Path,
                        default=None,
                        help="INI configuration layered over the built-in defaults.")
    parser.add_argument("--seed",
                        type=int,
                        default=None,
                        help="Overrides [run] seed.")
    parser.add_argument("--jobs",
                        type=int,
                        default=None,
                        help="Overrides [run] jobs, the number of worker processes.")
    return parser


_common(argsubparsers.add_parser("synth", help="Sample a synthetic world and write waveforms and its bulletin."))
_common(argsubparsers.add_parser("train", help="Fit the model by EM from a training bulletin and waveforms."))
_common(argsubparsers.add_parser("infer", help="Run MCMC chains over the waveforms and write a bulletin."))
_common(argsubparsers.add_parser("eval", help="Score a bulletin against the reference bulletin."))
_common(argsubparsers.add_parser("emit-plots", help="Write CSV data for PR curves, error histograms and model fits."))


command_dict = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "emit-plots": cmd_emit_plots,
}


def subcommand_main() -> None:
    args = argparser.parse_args()

    _LOG.addHandler(logging.StreamHandler(sys.stdout))
    if args.verbose:
        _LOG.setLevel(logging.DEBUG)
    else:
        _LOG.setLevel(logging.INFO)

    try:
        target_function = command_dict[args.command]
        target_function(args)
    except (SigmonError, OSError) as exc:
        _LOG.error(f"sigmon {args.command}: {exc}")
        sys.exit(1)
