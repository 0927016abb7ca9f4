"""
Image datasets: binary PPM (P6) directories and seeded synthetic images.

Images are float64 arrays [3, H, W] with values in [0, 1].
"""
import logging
import math
from pathlib import Path

import numpy as np

from engine.prng import Xoshiro256, derive_seed

logger = logging.getLogger("lic-quant.storage.datasets")

PPM_MAGIC = b"P6"
PPM_MAXVAL = 255
PPM_SUFFIXES = (".ppm",)
SINUSOIDS_PER_CHANNEL = 8
MAX_CYCLES = 4.0
WHITESPACE = b" \t\n\r\v\f"


class DatasetError(Exception):
    """Raised when an image file is malformed; carries the file name and byte offset."""

    def __init__(self, filename: str, offset: int, message: str) -> None:
        super().__init__(f"{filename} at byte {offset}: {message}")
        self.filename = filename
        self.offset = offset


class _HeaderReader:
    def __init__(self, data: bytes, filename: str) -> None:
        self.data = data
        self.filename = filename
        self.pos = 0

    def fail(self, message: str) -> DatasetError:
        return DatasetError(self.filename, self.pos, message)

    def skip_whitespace_and_comments(self) -> None:
        while self.pos < len(self.data):
            byte = self.data[self.pos:self.pos + 1]
            if byte == b"#":
                end = self.data.find(b"\n", self.pos)
                self.pos = len(self.data) if end < 0 else end + 1
            elif byte in WHITESPACE:
                self.pos += 1
            else:
                return

    def integer(self, name: str) -> int:
        self.skip_whitespace_and_comments()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos:self.pos + 1].isdigit():
            self.pos += 1
        if self.pos == start:
            raise self.fail(f"expected {name}")
        return int(self.data[start:self.pos])


def parse_ppm(data: bytes, filename: str = "<bytes>") -> np.ndarray:
    """
    Decode a binary PPM (P6, maxval 255).

    :param bytes data: File contents.
    :param str filename: Name used in error messages.
    :return: Image [3, H, W] scaled to [0, 1].
    :rtype: np.ndarray

    :raises: DatasetError with the byte offset of the first malformed element.
    """
    reader = _HeaderReader(data, filename)
    magic = data[:2]
    if magic != PPM_MAGIC:
        raise reader.fail(f"P6 required, found {magic!r}")
    reader.pos = 2
    if reader.pos >= len(data) or data[reader.pos:reader.pos + 1] not in WHITESPACE + b"#":
        raise reader.fail("P6 required")
    width = reader.integer("width")
    height = reader.integer("height")
    maxval = reader.integer("maxval")
    if width < 1 or height < 1:
        raise reader.fail(f"image size must be positive, got {width}x{height}")
    if maxval != PPM_MAXVAL:
        raise reader.fail(f"maxval must be {PPM_MAXVAL}, got {maxval}")
    if reader.pos >= len(data) or data[reader.pos:reader.pos + 1] not in WHITESPACE:
        raise reader.fail("expected a single whitespace byte after maxval")
    reader.pos += 1
    expected = width * height * 3
    payload = data[reader.pos:reader.pos + expected]
    if len(payload) < expected:
        reader.pos += len(payload)
        raise reader.fail(f"truncated payload: expected {expected} bytes, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / PPM_MAXVAL


def load_ppm(path: str | Path) -> np.ndarray:
    path = Path(path)
    return parse_ppm(path.read_bytes(), path.name)


def load_dataset(path: str | Path) -> list[np.ndarray]:
    """
    Load every PPM file of a directory, sorted by file name.

    :param path: Directory of P6 files.
    :return: Images [3, H, W] in [0, 1].
    :rtype: list[np.ndarray]

    :raises: DatasetError on a missing directory or a malformed file.
    """
    directory = Path(path)
    if not directory.is_dir():
        raise DatasetError(str(directory), 0, "dataset directory not found")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in PPM_SUFFIXES)
    images = [load_ppm(p) for p in files]
    logger.info(f"Loaded {len(images)} images from {directory}")
    return images


def save_ppm(image: np.ndarray, path: str | Path) -> None:
    """
    Write an image [3, H, W] in [0, 1] as binary PPM; values are rounded half to even
    after scaling to [0, 255].
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected an image of shape [3, H, W], got {image.shape}")
    _, height, width = image.shape
    pixels = np.clip(np.rint(image * PPM_MAXVAL), 0, PPM_MAXVAL).astype(np.uint8)
    header = b"P6\n%d %d\n%d\n" % (width, height, PPM_MAXVAL)
    Path(path).write_bytes(header + pixels.transpose(1, 2, 0).tobytes())


def synth_image(size: int, rng: Xoshiro256) -> np.ndarray:
    """Sum of random 2-D sinusoids per channel, rescaled to [0, 1]."""
    coords = np.arange(size, dtype=np.float64) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    image = np.empty((3, size, size))
    for c in range(3):
        fy = rng.uniform(SINUSOIDS_PER_CHANNEL, -MAX_CYCLES, MAX_CYCLES)
        fx = rng.uniform(SINUSOIDS_PER_CHANNEL, -MAX_CYCLES, MAX_CYCLES)
        phase = rng.uniform(SINUSOIDS_PER_CHANNEL, 0.0, 2 * math.pi)
        amplitude = rng.uniform(SINUSOIDS_PER_CHANNEL, 0.5, 1.0)
        channel = np.zeros((size, size))
        for k in range(SINUSOIDS_PER_CHANNEL):
            channel += amplitude[k] * np.sin(2 * math.pi * (fy[k] * yy + fx[k] * xx) + phase[k])
        lo, hi = channel.min(), channel.max()
        image[c] = (channel - lo) / (hi - lo) if hi > lo else 0.5
    return image


def synth_dataset(count: int, size: int, seed: int) -> list[np.ndarray]:
    """
    Seeded smooth synthetic images; image ``i`` depends only on (seed, i).

    :param int count: Number of images (0 gives an empty list).
    :param int size: Side length in pixels.
    :param int seed: Generator seed.
    :return: Images [3, size, size] in [0, 1].
    :rtype: list[np.ndarray]
    """
    if count < 0 or size < 1:
        raise ValueError(f"count must be >= 0 and size >= 1, got count={count} size={size}")
    return [synth_image(size, Xoshiro256(derive_seed(seed, "synth", i))) for i in range(count)]
