from argparse import Namespace
from typing import Union

from py_oce_seg.core.engine import OceEngine
from py_oce_seg.core.utils.responses import CommandResponse


class OceClient:
    """A client for running pipeline commands and formatting their responses.

    Attributes:
        engine (OceEngine): The engine that executes the commands.
    """
    def __init__(self) -> None:
        self.engine = OceEngine()

    def format_request(self, command: str, args: Namespace) -> str:
        """Formats a command and its flags into a single log line.

        Args:
            command: Subcommand name.
            args: Parsed flags; unset flags are left out.

        Returns:
            A line like "▶ train --data d --epochs 5".
        """
        flags = " ".join(
            f"--{name.replace('_', '-')} {value}" for name, value in sorted(vars(args).items())
            if value not in (None, False) and name != "command"
        )
        return f"▶ {command} {flags}".rstrip()

    def format_response(self, response: CommandResponse) -> str:
        """Formats a response with a status indicator.

        - 🟢 for success.
        - 🔴 for a failure, followed by the exit code.
        """
        if response.ok:
            return f"🟢 {response.command}: {response.message}"
        return f"🔴 {response.command} (exit {response.exit_code}): {response.message}"

    def send_request(
        self, command: str, args: Namespace, return_formatted_response: bool
    ) -> Union[CommandResponse, str]:
        """Runs a command through the engine, logging request and response.

        Args:
            command: Subcommand name.
            args: Parsed flags of the subcommand.
            return_formatted_response: If True, return the formatted status
                line instead of the response object.

        Returns:
            The response object or its formatted status line.
        """
        self.engine.logger.info(self.format_request(command, args))
        response = self.engine.process_request(command, args)
        formatted_response = self.format_response(response)
        if response.ok:
            self.engine.logger.info(formatted_response)
        else:
            self.engine.logger.error(formatted_response)
        if return_formatted_response:
            return formatted_response
        return response
