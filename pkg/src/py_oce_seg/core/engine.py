import os
import sys
import logging
from argparse import Namespace

from py_oce_seg.core.utils.services import data_generation
from py_oce_seg.core.utils.services import model_training
from py_oce_seg.core.utils.services import instance_segmentation
from py_oce_seg.core.utils.services import evaluation
from py_oce_seg.core.utils.services import theory_verification
from py_oce_seg.core.utils.config import RunConfig, load_run_config
from py_oce_seg.core.utils.responses import CommandResponse, PositiveResponse, NegativeResponse
from py_oce_seg.core.utils.helpers import Command, ConfigError, Defaults, ExitCode, OceError, UsageError


class OceEngine:
    """
    Runs the segmentation pipeline's subcommands.

    The engine owns the package logger, the shared constants and the response
    builders, and holds one handler per subcommand. `process_request` routes
    a parsed command line to its handler.

    Attributes:
        DEFAULT_LOG_FILE (str): The default path for the log file.
        logger (logging.Logger): The package logger.
        COMMAND (Command): Subcommand names.
        EXIT (ExitCode): Process exit codes.
        DEFAULTS (Defaults): Shared file and directory names.
        positive_response (PositiveResponse): Builder for successful responses.
        negative_response (NegativeResponse): Builder for failed responses.
        ...and one attribute per subcommand handler.
    """
    def __init__(self):
        # Logger
        self.DEFAULTS = Defaults()
        self.DEFAULT_LOG_FILE = self.DEFAULTS.LOG_FILE
        self.logger = self._initialize_logger()
        # Constants
        self.COMMAND = Command()
        self.EXIT = ExitCode()
        # Responses
        self.positive_response = PositiveResponse()
        self.negative_response = NegativeResponse()
        # Data generation
        self.synth = data_generation.Synth(self)
        self.pseudo = data_generation.Pseudo(self)
        # Model training
        self.train = model_training.Train(self)
        self.predict = model_training.Predict(self)
        # Instance segmentation
        self.segment = instance_segmentation.Segment(self)
        self.sweep = instance_segmentation.Sweep(self)
        # Evaluation
        self.eval = evaluation.Eval(self)
        # Theory
        self.theory = theory_verification.Theory(self)
        # Command map
        self.command_map = {
            self.COMMAND.SYNTH: self.synth,
            self.COMMAND.TRAIN: self.train,
            self.COMMAND.PREDICT: self.predict,
            self.COMMAND.SEGMENT: self.segment,
            self.COMMAND.EVAL: self.eval,
            self.COMMAND.SWEEP: self.sweep,
            self.COMMAND.PSEUDO: self.pseudo,
            self.COMMAND.THEORY: self.theory,
        }

    def _initialize_logger(self):
        """
        Initializes the package logger.

        Messages go to a log file and to the error stream, leaving standard
        output to the reports. Handlers are added only once per process.

        Returns:
            logging.Logger: The configured logger instance.
        """
        os.makedirs(os.path.dirname(self.DEFAULT_LOG_FILE), exist_ok=True)
        logger = logging.getLogger("py_oce_seg")
        logger.setLevel(logging.INFO)
        fmt = "%(asctime)s [OCE_SEG] [%(levelname)-4.8s] %(message)s"
        if not any(isinstance(h, logging.FileHandler) for h in logger.handlers):
            file_handler = logging.FileHandler(self.DEFAULT_LOG_FILE, encoding="utf-8")
            file_handler.setLevel(logging.INFO)
            file_handler.setFormatter(logging.Formatter(fmt))
            logger.addHandler(file_handler)
        if not any(type(h) is logging.StreamHandler for h in logger.handlers):
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setLevel(logging.INFO)
            console_handler.setFormatter(logging.Formatter(fmt))
            logger.addHandler(console_handler)
        logger.propagate = True
        return logger

    @property
    def supported_commands(self) -> list:
        """
        Returns the names of all subcommands the engine can run.
        """
        return list(self.command_map)

    def load_config(self, args: Namespace, overrides: dict | None = None) -> RunConfig:
        """Builds the effective configuration from `--config`, `--seed` and command flags."""
        return load_run_config(getattr(args, "config", None), getattr(args, "seed", None), overrides)

    def report_failure(self, command: str, error: Exception) -> CommandResponse:
        """
        Turns an exception raised by a handler into a negative response.

        Usage and configuration problems map to exit code 1, every other
        pipeline or file-system error to exit code 2.
        """
        if isinstance(error, (UsageError, ConfigError)):
            exit_code = self.EXIT.USAGE_ERROR
        elif isinstance(error, (OceError, OSError)):
            exit_code = self.EXIT.DATA_ERROR
        else:
            raise error
        self.logger.error(f"{command} failed: {error}")
        return self.negative_response.report_negative_response(command, exit_code, str(error))

    def process_request(self, command: str, args: Namespace) -> CommandResponse:
        """
        Runs one subcommand.

        Args:
            command: Subcommand name.
            args: Parsed command-line flags of the subcommand.

        Returns:
            The handler's response, or a usage error for unknown commands.
        """
        handler = self.command_map.get(command)
        if handler is None:
            return self.negative_response.report_negative_response(
                command, self.EXIT.USAGE_ERROR, f"unknown command {command!r}"
            )
        return handler.process_request(args)
