class Command:
    """Subcommand names understood by the engine.

    The engine's command map is keyed by these names.
    """
    def __init__(self) -> None:
        self.SYNTH = "synth"
        self.TRAIN = "train"
        self.PREDICT = "predict"
        self.SEGMENT = "segment"
        self.EVAL = "eval"
        self.SWEEP = "sweep"
        self.PSEUDO = "pseudo"
        self.THEORY = "theory"


class ExitCode:
    """Process exit codes reported by the command line front end."""
    def __init__(self) -> None:
        self.SUCCESS = 0
        self.USAGE_ERROR = 1
        self.DATA_ERROR = 2


class TensorDtype:
    """Dtype codes of the tensor container format.

    Attributes map the on-disk code to the little-endian numpy dtype string.
    """
    def __init__(self) -> None:
        self.FLOAT32 = 0
        self.INT32 = 1
        self.UINT8 = 2
        self.numpy_by_code = {
            self.FLOAT32: "<f4",
            self.INT32: "<i4",
            self.UINT8: "u1",
        }


class Defaults:
    """File names and paths shared by the subcommands."""
    def __init__(self) -> None:
        self.LOG_FILE = "_temp/logs/oce_seg.log"
        self.RUN_CONFIG = "run_config.json"
        self.CHECKPOINT = "model.ocea"
        self.LOSS_TRACE = "loss_trace.tsv"
        self.TENSOR_SUFFIX = ".ocet"
        self.IMAGES_DIR = "images"
        self.LABELS_DIR = "labels"
        self.MASKS_DIR = "masks"
        self.FIELDS_DIR = "fields"
        self.FOREGROUND_DIR = "foreground"
        self.VARIANCE_DIR = "variance"
        self.PGM_DIR = "pgm"
        self.KNOWN_BACKGROUND_DIR = "known_background"


class OceError(Exception):
    """Base class of every error raised by the package."""


class PreconditionError(OceError, ValueError):
    """An operation was called with inputs that violate its preconditions."""


class PlacementError(OceError, RuntimeError):
    """Rejection sampling could not place the requested objects."""


class TensorFileError(OceError):
    """A tensor container file could not be decoded."""


class BadMagicError(TensorFileError):
    """The file does not start with the container magic."""


class UnsupportedVersionError(TensorFileError):
    """The container version byte is not the one this reader understands."""

    def __init__(self, expected: int, found: int) -> None:
        super().__init__(f"unsupported tensor file version: expected {expected}, found {found}")
        self.expected = expected
        self.found = found


class UnsupportedDtypeError(TensorFileError):
    """The dtype byte names no known element type."""


class TruncatedFileError(TensorFileError):
    """The file ends before the header or payload is complete."""


class TrailingDataError(TensorFileError):
    """The payload is longer than the header declares."""


class PgmFormatError(OceError):
    """The PGM file is not a binary P5 graymap or its header is malformed."""


class ConfigError(OceError):
    """The run configuration is not valid."""


class UsageError(OceError):
    """The command line could not be parsed."""
