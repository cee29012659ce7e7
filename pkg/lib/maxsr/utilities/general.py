import io
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd
from decouple import config
from PIL import Image

from maxsr.errors import ConfigError, ImageFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


@dataclass(frozen=True)
class Settings:
    """
    Process-wide settings read from the environment (or a .env file).

    Attributes:
        threads: int
            MAXSR_THREADS, the cap on internal workers for per-image
            evaluation and training-data prefetch.
        log_level: str
            MAXSR_LOG_LEVEL, the level the command line logs at.
    """

    threads: int = 1
    log_level: str = "WARNING"

    @classmethod
    def from_env(cls) -> "Settings":
        try:
            threads = config("MAXSR_THREADS", default=1, cast=int)
        except ValueError as err:
            raise ConfigError(f"MAXSR_THREADS must be an integer: {err}") from err
        level = config("MAXSR_LOG_LEVEL", default="WARNING").upper()
        if threads < 1:
            raise ConfigError(f"MAXSR_THREADS must be >= 1, got {threads}")
        if level not in LOG_LEVELS:
            raise ConfigError(f"MAXSR_LOG_LEVEL must be one of {LOG_LEVELS}")

        return cls(threads=threads, log_level=level)


class Files:

    def __init__(self) -> None:
        pass

    @staticmethod
    def atomic_write(path: PathLike, payload: bytes) -> Path:
        """Write `payload` to a sibling temp file, then rename it over `path`.

        Readers never see a partially written file; on failure the target is
        left untouched and the temp file removed.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        handle, temp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        try:
            with os.fdopen(handle, "wb") as stream:
                stream.write(payload)
            os.replace(temp, path)
        except BaseException:
            Path(temp).unlink(missing_ok=True)
            raise
        logger.debug("Wrote %d bytes to %s", len(payload), path)

        return path

    @staticmethod
    def write_text(path: PathLike, text: str) -> Path:
        return Files.atomic_write(path, text.encode("utf-8"))

    @staticmethod
    def write_frame(path: PathLike, frame: pd.DataFrame) -> Path:
        return Files.write_text(path, frame.to_csv(index=False))

    @staticmethod
    def write_png(path: PathLike, pixels: np.ndarray) -> Path:
        """Encode an [H, W, 3] uint8 array as PNG and write it atomically."""
        if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ImageFormatError(
                f"PNG export needs [H, W, 3] uint8, got {pixels.shape} {pixels.dtype}"
            )
        buffer = io.BytesIO()
        Image.fromarray(pixels).save(buffer, format="PNG")

        return Files.atomic_write(path, buffer.getvalue())
