import os
from argparse import Namespace
from typing import TYPE_CHECKING

from py_oce_seg.core.theory_lab import format_theory_report, run_theory
from py_oce_seg.core.utils.config import write_effective_config
from py_oce_seg.core.utils.responses import CommandResponse
if TYPE_CHECKING:
    from py_oce_seg.core.engine import OceEngine


class Theory:
    """
    Handles the `theory` command: the Monte-Carlo expected-offset report.

    Scenes of identical template copies are generated and the offsets
    between two patch appearances are split into same-object and
    cross-object terms. The report table goes to standard output and, with
    `--out`, to a file.

    Attributes:
        oce_engine: The engine instance.
    """
    def __init__(self, oce_engine: 'OceEngine') -> None:
        self.oce_engine: 'OceEngine' = oce_engine

    def process_request(self, args: Namespace) -> CommandResponse:
        """
        Processes an expected-offset request.

        Args:
            args: Parsed `theory` flags (`scenes`, `objects`, `boundary`, `out`).

        Returns:
            The command response; a negative response carries exit code 1 or 2.
        """
        command = self.oce_engine.COMMAND.THEORY
        try:
            config = self.oce_engine.load_config(args, {"theory": {
                "scenes": args.scenes,
                "objects": args.objects,
                "boundary": args.boundary,
            }})
            result = run_theory(config.theory, config.seed)
            report = format_theory_report(result)
            if args.out:
                out_dir = os.path.dirname(os.path.abspath(args.out))
                os.makedirs(out_dir, exist_ok=True)
                with open(args.out, "w", encoding="utf-8") as handle:
                    handle.write(report)
                write_effective_config(out_dir, config)
        except Exception as e:
            return self.oce_engine.report_failure(command, e)
        cross = result.decomposition.cross
        return self.oce_engine.positive_response.report_positive_response(
            command,
            f"{result.scenes} scenes, cross-object mean ({cross.mean[0]:.4f}, {cross.mean[1]:.4f}) "
            f"+/- ({cross.standard_error[0]:.4f}, {cross.standard_error[1]:.4f})",
            {"report": report},
        )
