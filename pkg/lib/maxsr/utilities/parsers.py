import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

from maxsr.errors import CheckpointError, ConfigError, ImageFormatError
from maxsr.utilities.constructors import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    DTYPE_CODES,
)

logger = logging.getLogger(__name__)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


class _Reader:
    """Cursor over a byte string that fails loudly on truncation."""

    def __init__(self, raw: bytes) -> None:
        self.raw = raw
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.raw):
            raise CheckpointError(
                f"Checkpoint truncated: needed {count} bytes at offset {self.offset}"
            )
        chunk = self.raw[self.offset : end]
        self.offset = end

        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


class Parse:

    def __init__(self) -> None:
        pass

    @staticmethod
    def checkpoint(raw: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
        """
        Decode a checkpoint byte string.

        Args:
          raw: bytes
            The full file contents.

        Returns:
          The config dictionary and the tensors by name, in file order.

        Raises:
          CheckpointError: bad magic, unknown version or dtype code, a
            truncated body, or trailing bytes after the last tensor.
        """
        reader = _Reader(raw)
        if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError("Not a maxsr checkpoint: bad magic")
        (version,) = reader.unpack("<B")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version}")

        (blob_length,) = reader.unpack("<I")
        try:
            config = json.loads(reader.take(blob_length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError("Checkpoint config is not valid JSON") from err

        tensors: Dict[str, np.ndarray] = {}
        (count,) = reader.unpack("<I")
        for _ in range(count):
            (name_length,) = reader.unpack("<H")
            name = reader.take(name_length).decode("utf-8")
            code, rank = reader.unpack("<BB")
            if code not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            shape = reader.unpack(f"<{rank}I")
            dtype = _DTYPES[code].newbyteorder("<")
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            values = np.frombuffer(reader.take(nbytes), dtype=dtype)
            tensors[name] = values.astype(_DTYPES[code]).reshape(shape)

        if reader.offset != len(raw):
            raise CheckpointError(
                f"{len(raw) - reader.offset} unexpected bytes after the last tensor"
            )

        return config, tensors

    @staticmethod
    def png(path: Union[str, Path]) -> np.ndarray:
        """
        Read an 8-bit PNG as an [H, W, 3] uint8 array.

        Grayscale, palette and alpha images are converted to RGB; 16-bit
        images are rejected rather than silently truncated.

        Raises:
          ImageFormatError: the file is not a PNG or has 16-bit samples.
        """
        path = Path(path)
        with open(path, "rb") as handle:
            header = handle.read(26)
        if header[:8] != PNG_SIGNATURE or len(header) < 26:
            raise ImageFormatError(f"{path.name} is not a PNG file")
        if header[24] > 8:
            raise ImageFormatError(
                f"{path.name} has {header[24]}-bit samples; only 8-bit PNGs are read"
            )

        try:
            with Image.open(path) as image:
                if image.mode != "RGB":
                    logger.debug("Converting %s from %s to RGB", path.name, image.mode)
                array = np.asarray(image.convert("RGB"), dtype=np.uint8)
        except (UnidentifiedImageError, OSError) as err:
            raise ImageFormatError(f"Cannot decode {path.name}: {err}") from err

        return array.copy()

    @staticmethod
    def json_config(
        path: Union[str, Path], allowed: Iterable[str]
    ) -> Dict[str, Any]:
        """Read a JSON object and reject keys outside `allowed`."""
        try:
            document = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path} is not valid JSON: {err}") from err
        if not isinstance(document, dict):
            raise ConfigError(f"{path} must hold a JSON object")
        unknown = sorted(set(document) - set(allowed))
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")

        return document

    @staticmethod
    def table(
        columns: Mapping[str, Sequence[Any]], as_frame: Optional[bool] = False
    ) -> Union[Dict[str, list], pd.DataFrame]:
        """Column dictionary as plain lists, or as a DataFrame when `as_frame`."""
        lengths = {len(values) for values in columns.values()}
        if len(lengths) > 1:
            raise ValueError(f"Ragged table columns: {sorted(lengths)}")
        dict_table = {header: list(values) for header, values in columns.items()}

        if as_frame:
            return pd.DataFrame.from_dict(dict_table)

        return dict_table
