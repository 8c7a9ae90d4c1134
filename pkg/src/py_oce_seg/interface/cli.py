import argparse
import sys

from py_oce_seg.core.client import OceClient
from py_oce_seg.core.utils.helpers import Command, ExitCode, UsageError


class _Parser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting on bad input."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _probability(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"{text} is not in (0, 1]")
    return value


class Cli:
    """Command-line front end: one subcommand per pipeline stage.

    Every subcommand accepts `--config FILE` (JSON run configuration) and
    `--seed N`; flags given on the command line override the file.
    """
    def __init__(self):
        self.client = OceClient()
        self.parser = self._build_parser()

    def _build_parser(self) -> argparse.ArgumentParser:
        command = Command()
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument("--config", help="JSON run configuration; missing keys take their defaults")
        common.add_argument("--seed", type=int, help="global seed (default 0)")

        parser = _Parser(
            prog="py_oce_seg",
            description="Unsupervised cell instance segmentation with object-centric embeddings.",
            epilog="Example usage:\n"
                   "  python -m py_oce_seg synth --out data --images 50 --seed 7\n"
                   "  python -m py_oce_seg train --data data --out run\n"
                   "  python -m py_oce_seg segment --model run/model.ocea --data data --out seg --pgm\n"
                   "  python -m py_oce_seg eval --gt data --pred seg --thresholds 0.5 0.7\n"
                   "You can also use '?' instead of --help to display this message.",
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        subparsers = parser.add_subparsers(dest="command", metavar="command")

        synth = subparsers.add_parser(command.SYNTH, parents=[common], help="generate a synthetic dataset")
        synth.add_argument("--out", required=True, help="dataset folder to create (train/ and eval/ splits)")
        synth.add_argument("--images", type=int, help="number of images")
        synth.add_argument("--canvas", type=int, help="image side length in pixels")
        synth.add_argument("--objects", type=int, help="objects per image")

        train = subparsers.add_parser(command.TRAIN, parents=[common], help="train the embedding network")
        train.add_argument("--data", required=True, help="dataset folder with images/ (or a train/ split)")
        train.add_argument("--out", required=True, help="output folder for the checkpoint and loss trace")
        train.add_argument("--epochs", type=int)
        train.add_argument("--batch", type=int, help="crops per step")
        train.add_argument("--crop", type=int, help="crop side length")
        train.add_argument("--resume", help="checkpoint to continue from")

        predict = subparsers.add_parser(command.PREDICT, parents=[common], help="write dense offset fields")
        predict.add_argument("--model", required=True, help="checkpoint file")
        predict.add_argument("--data", required=True, help="dataset folder with images/ (or an eval/ split)")
        predict.add_argument("--out", required=True)

        segment = subparsers.add_parser(command.SEGMENT, parents=[common], help="write instance masks")
        segment.add_argument("--model", required=True, help="checkpoint file")
        segment.add_argument("--data", required=True, help="dataset folder with images/ (or an eval/ split)")
        segment.add_argument("--out", required=True)
        segment.add_argument("--bandwidth", type=float)
        segment.add_argument("--shrink", type=float, help="shrink distance in pixels, 0 to 6")
        segment.add_argument("--pgm", action="store_true", help="also write PGM renderings of the masks")
        segment.add_argument("--save-foreground", action="store_true")
        segment.add_argument("--save-variance", action="store_true")

        evaluate = subparsers.add_parser(command.EVAL, parents=[common], help="score masks against ground truth")
        evaluate.add_argument("--gt", required=True, help="folder with ground-truth label maps")
        evaluate.add_argument("--pred", required=True, help="folder with predicted masks")
        evaluate.add_argument("--thresholds", type=_probability, nargs="+", help="IoU thresholds")
        evaluate.add_argument("--per-image", action="store_true", help="average per-image scores")
        evaluate.add_argument("--out", help="also write the table to this file")

        sweep = subparsers.add_parser(command.SWEEP, parents=[common], help="search bandwidth and shrink distance")
        sweep.add_argument("--model", required=True, help="checkpoint file")
        sweep.add_argument("--data", required=True, help="labeled validation folder")
        sweep.add_argument("--bandwidths", type=float, nargs="+")
        sweep.add_argument("--shrinks", type=float, nargs="+")
        sweep.add_argument("--metric", choices=["f1", "seg", "accuracy"])
        sweep.add_argument("--out", help="folder for sweep.tsv and the best run_config.json")

        pseudo = subparsers.add_parser(command.PSEUDO, parents=[common], help="build sparse and pseudo datasets")
        pseudo.add_argument("--pred", required=True, help="folder with predicted masks")
        pseudo.add_argument("--gt", required=True, help="labeled dataset folder")
        pseudo.add_argument("--out", required=True)
        pseudo.add_argument("--fraction", type=float, help="fraction of objects annotated")

        theory = subparsers.add_parser(command.THEORY, parents=[common], help="expected-offset Monte-Carlo report")
        theory.add_argument("--scenes", type=int)
        theory.add_argument("--objects", type=int)
        theory.add_argument("--boundary", choices=["periodic", "bounded"])
        theory.add_argument("--out", help="also write the report to this file")
        return parser

    def dispatch(self, argv: list[str]) -> int:
        """Parses `argv`, runs the subcommand and returns the process exit code.

        Tables go to standard output, status lines and usage text to the
        error stream.
        """
        argv = ["--help" if arg == "?" else arg for arg in argv]
        try:
            args = self.parser.parse_args(argv)
            if args.command is None:
                raise UsageError("py_oce_seg: error: a command is required")
        except UsageError as e:
            print(self.parser.format_usage(), end="", file=sys.stderr)
            print(f"😡 {e}", file=sys.stderr)
            return ExitCode().USAGE_ERROR
        except SystemExit as e:
            return int(e.code or 0)
        response = self.client.send_request(args.command, args, False)
        if "report" in response.data:
            print(response.data["report"], end="")
        print(self.client.format_response(response), file=sys.stderr)
        return response.exit_code


def main(argv: list[str] | None = None) -> int:
    return Cli().dispatch(sys.argv[1:] if argv is None else argv)
