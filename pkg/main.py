import os
import sys
import argparse
import logging.handlers
import atexit
from dotenv import load_dotenv

from codec.model import ModelConfigError
from codec.train import TrainingDivergedError
from draq.calibration import CalibrationError
from engine.tensor import NumericalError
from hwopt.bitwidth import SearchError
from stages import STAGES, Pipeline, PrerequisiteError
from storage.checkpoint import CheckpointError
from storage.config import ConfigError, load_run_config
from storage.datasets import DatasetError

load_dotenv()

LOG_LEVEL = os.getenv("LIC_QUANT_LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("LIC_QUANT_LOG_FILE", "lic_quant.log")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MODEL = 4

# Exception categories, checked in order
EXIT_CODES: tuple[tuple[tuple[type[BaseException], ...], int], ...] = (
    ((ConfigError, ModelConfigError, PrerequisiteError), EXIT_CONFIG),
    ((DatasetError, CheckpointError), EXIT_DATA),
    ((NumericalError, TrainingDivergedError, CalibrationError, SearchError), EXIT_MODEL),
)

lic_quant_logger = logging.getLogger("lic-quant")


def setup_logging() -> None:
    """
    Configure the root logger once: stderr plus a rotating log file.

    :return: None
    :rtype: None
    """
    logging.basicConfig(
        format="[%(asctime)s] %(levelname)s in %(module)s: %(message)s",
        handlers=[
            # Prints to sys.stderr
            logging.StreamHandler(),
            # Writes to a log file which rotates every 1mb, or gets overwritten on every run
            logging.handlers.RotatingFileHandler(
                filename=LOG_FILE,
                mode='w',
                maxBytes=1024 * 1024,
                backupCount=3
            )
        ],
        level=LOG_LEVEL,
    )
    lic_quant_logger.propagate = True


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Quantization and hardware-aware optimization of a toy "
                                                 "learned image codec.")
    parser.add_argument("--config", required=True, help="Path to the JSON run configuration.")
    parser.add_argument("--stage", required=True, action="append", choices=STAGES,
                        help="Stage to run; repeat to run several in order.")
    parser.add_argument("--seed", type=int, default=None, help="Override the configured seed.")
    parser.add_argument("--out", default=None, help="Override the output directory.")
    return parser.parse_args(argv)


def exit_code(error: BaseException) -> int:
    for categories, code in EXIT_CODES:
        if isinstance(error, categories):
            return code
    return EXIT_OTHER


def run(argv: list[str] | None = None) -> int:
    """
    Load the configuration and run the requested stages.

    :param argv: Command-line arguments (sys.argv[1:] by default).
    :return: The process exit code.
    :rtype: int
    """
    args = parse_args(argv)
    try:
        config = load_run_config(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        pipeline = Pipeline(config, args.out)
        for stage in args.stage:
            pipeline.run(stage)
    except Exception as e:
        lic_quant_logger.exception(f"Run failed: {e}")
        return exit_code(e)
    return EXIT_OK


@atexit.register
def on_shutdown() -> None:
    """
    Function to run when the process exits.

    :return: None
    :rtype: None
    """
    lic_quant_logger.info("Shutting down")


if __name__ == '__main__':
    setup_logging()
    sys.exit(run())
