from dataclasses import dataclass, field

from py_oce_seg.core.utils.helpers import ExitCode


@dataclass
class CommandResponse:
    """Outcome of one subcommand.

    Attributes:
        command: The subcommand that produced the response.
        exit_code: Process exit code (0 success, 1 usage error, 2 data error).
        message: One-line human readable summary.
        data: Command specific results (paths, scores, tables).
    """
    command: str
    exit_code: int
    message: str
    data: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.exit_code == ExitCode().SUCCESS


class PositiveResponse:
    """Handles the creation of successful command responses."""

    def report_positive_response(self, command: str, message: str, data: dict | None = None) -> CommandResponse:
        """Constructs a successful response.

        Args:
            command: The subcommand that succeeded.
            message: Summary line shown to the user.
            data: Optional command results.

        Returns:
            A response carrying exit code 0.
        """
        return CommandResponse(command, ExitCode().SUCCESS, message, dict(data or {}))


class NegativeResponse:
    """Handles the creation of failed command responses."""

    def report_negative_response(self, command: str, exit_code: int, message: str) -> CommandResponse:
        """Constructs a failed response.

        Args:
            command: The subcommand that failed.
            exit_code: Usage error (1) or data error (2).
            message: Description of the failure.

        Returns:
            A response carrying the given non-zero exit code.
        """
        return CommandResponse(command, exit_code, message)
