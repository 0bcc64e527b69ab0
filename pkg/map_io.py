"""
Map and image file I/O.
Float maps are stored as little-endian PFM; integer maps as 16-bit grayscale
PNG with a JSON sidecar describing the quantization. Codecs share a common
base class and are created by a small factory keyed on the format name.
"""

import json
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from PIL import Image

from disparity_core import ConfidenceMap, DepthMap, DisparityMap
from exceptions import FileOperationError, ValidationError
from validation_utils import InputValidator

logger = logging.getLogger(__name__)

MAP_KINDS = ('disparity', 'depth', 'confidence')
MapType = Union[DepthMap, DisparityMap, ConfidenceMap]


def _values_and_mask(grid_map: MapType):
    if isinstance(grid_map, ConfidenceMap):
        return grid_map.values, np.ones(grid_map.shape, dtype=bool)
    return grid_map.values, grid_map.valid


def _build_map(values: np.ndarray, valid: np.ndarray, kind: str) -> MapType:
    if kind == 'disparity':
        return DisparityMap(values, valid)
    if kind == 'depth':
        return DepthMap(values, valid)
    if kind == 'confidence':
        return ConfidenceMap(np.where(valid, values, 0.0))
    raise ValidationError(f"Unknown map kind '{kind}'. Valid kinds: {', '.join(MAP_KINDS)}")


class BaseMapCodec(ABC):
    """Abstract base class for map file formats."""

    format_name = ""

    @abstractmethod
    def read(self, path: Path, kind: str) -> MapType:
        """Read a map of the given kind."""
        pass

    @abstractmethod
    def write(self, grid_map: MapType, path: Path, **options):
        """Write a map."""
        pass


class PfmCodec(BaseMapCodec):
    """Portable float map: ``Pf`` (gray) or ``PF`` (RGB), rows stored bottom to top."""

    format_name = 'pfm'

    def read(self, path: Path, kind: str) -> MapType:
        array = read_pfm(path)
        if array.ndim != 2:
            raise FileOperationError(path, "expected a single-channel 'Pf' map")
        return _build_map(array, np.isfinite(array), kind)

    def write(self, grid_map: MapType, path: Path, **options):
        values, valid = _values_and_mask(grid_map)
        write_pfm(path, np.where(valid, values, np.nan))


class Png16Codec(BaseMapCodec):
    """16-bit grayscale PNG; value = (stored - offset) / scale, sentinel marks invalid pixels."""

    format_name = 'png16'

    DEFAULT_SCALE = 1000.0
    DEFAULT_OFFSET = 0.0
    DEFAULT_SENTINEL = 65535

    @staticmethod
    def sidecar_path(path: Path) -> Path:
        return Path(str(path) + '.json')

    def read(self, path: Path, kind: str) -> MapType:
        quantization = self._read_sidecar(path)
        try:
            with Image.open(path) as image:
                stored = np.array(image).astype(np.int64)
        except (OSError, ValueError) as e:
            raise FileOperationError(path, "cannot decode PNG", e)
        if stored.ndim != 2:
            raise FileOperationError(path, "expected a single-channel 16-bit PNG")
        valid = stored != quantization['valid_sentinel']
        values = (stored - quantization['offset']) / quantization['scale']
        return _build_map(values, valid, kind)

    def write(self, grid_map: MapType, path: Path, scale: float = None, offset: float = None,
              valid_sentinel: int = None, **options):
        scale = self.DEFAULT_SCALE if scale is None else float(scale)
        offset = self.DEFAULT_OFFSET if offset is None else float(offset)
        sentinel = self.DEFAULT_SENTINEL if valid_sentinel is None else int(valid_sentinel)
        if not InputValidator.validate_positive(scale, 'scale').is_valid:
            raise FileOperationError(path, f"scale must be positive, got {scale}")

        values, valid = _values_and_mask(grid_map)
        if not np.all(np.isfinite(values[valid])):
            raise FileOperationError(path, "non-finite values cannot be exported to a 16-bit map")
        quantized = np.rint(np.where(valid, values, 0.0) * scale + offset)
        in_range = (quantized >= 0) & (quantized <= 65535) & (quantized != sentinel)
        if not np.all(in_range[valid]):
            raise FileOperationError(path, f"values overflow the 16-bit range at scale={scale}, offset={offset}")
        stored = np.where(valid, quantized, sentinel).astype(np.uint16)

        try:
            Image.fromarray(stored).save(path, format='PNG')
            with open(self.sidecar_path(path), 'w', encoding='utf-8') as f:
                json.dump({'scale': scale, 'offset': offset, 'valid_sentinel': sentinel}, f, indent=2)
        except OSError as e:
            raise FileOperationError(path, "cannot write 16-bit PNG", e)

    def _read_sidecar(self, path: Path) -> Dict[str, float]:
        sidecar = self.sidecar_path(path)
        if not sidecar.is_file():
            logger.warning(f"No sidecar for {path}; using scale={self.DEFAULT_SCALE}")
            return {'scale': self.DEFAULT_SCALE, 'offset': self.DEFAULT_OFFSET,
                    'valid_sentinel': self.DEFAULT_SENTINEL}
        try:
            with open(sidecar, 'r', encoding='utf-8') as f:
                data = json.load(f)
            quantization = {
                'scale': float(data.get('scale', self.DEFAULT_SCALE)),
                'offset': float(data.get('offset', self.DEFAULT_OFFSET)),
                'valid_sentinel': int(data.get('valid_sentinel', self.DEFAULT_SENTINEL)),
            }
        except (OSError, ValueError, TypeError, AttributeError) as e:
            raise FileOperationError(sidecar, "malformed quantization sidecar", e)
        if quantization['scale'] <= 0:
            raise FileOperationError(sidecar, "scale must be positive")
        return quantization


class MapCodecFactory:
    """Factory for map codecs."""

    CODECS = {'pfm': PfmCodec, 'png16': Png16Codec}
    SUFFIXES = {'.pfm': 'pfm', '.png': 'png16'}

    @classmethod
    def create(cls, format_name: str) -> BaseMapCodec:
        """
        Create a codec by format name.

        Args:
            format_name: 'pfm' or 'png16'

        Returns:
            Codec instance

        Raises:
            ValidationError: If the format is unknown
        """
        codec_class = cls.CODECS.get(str(format_name).lower())
        if codec_class is None:
            raise ValidationError(f"Unsupported map format: {format_name}. "
                                  f"Valid formats: {', '.join(cls.CODECS)}")
        return codec_class()

    @classmethod
    def format_for_path(cls, path) -> str:
        """Infer the format name from a file suffix."""
        suffix = Path(str(path)).suffix.lower()
        if suffix not in cls.SUFFIXES:
            raise ValidationError(f"Cannot infer map format from '{path}'. "
                                  f"Use one of: {', '.join(cls.SUFFIXES)}")
        return cls.SUFFIXES[suffix]


def read_map(path, format_name: Optional[str] = None, kind: str = 'disparity') -> MapType:
    """
    Read a disparity, depth or confidence map.

    Args:
        path: Map file
        format_name: 'pfm' or 'png16'; inferred from the suffix when None
        kind: 'disparity', 'depth' or 'confidence'

    Returns:
        The map object of the requested kind
    """
    path = Path(str(path))
    if not path.is_file():
        raise FileOperationError(path, "file not found")
    codec = MapCodecFactory.create(format_name or MapCodecFactory.format_for_path(path))
    grid_map = codec.read(path, kind)
    logger.debug(f"Read {kind} map {path} ({codec.format_name}, {grid_map.shape[1]}x{grid_map.shape[0]})")
    return grid_map


def write_map(grid_map: MapType, path, format_name: Optional[str] = None, **options):
    """
    Write a map; ``options`` carry the PNG16 quantization (scale, offset, valid_sentinel).

    Args:
        grid_map: DepthMap, DisparityMap or ConfidenceMap
        path: Destination file
        format_name: 'pfm' or 'png16'; inferred from the suffix when None
    """
    path = Path(str(path))
    codec = MapCodecFactory.create(format_name or MapCodecFactory.format_for_path(path))
    codec.write(grid_map, path, **options)
    logger.debug(f"Wrote {type(grid_map).__name__} to {path} ({codec.format_name})")


def read_pfm(path) -> np.ndarray:
    """
    Read a PFM file into a float64 array (top row first).

    Raises:
        FileOperationError: On a malformed header or truncated data
    """
    path = Path(str(path))
    try:
        with open(path, 'rb') as f:
            header = f.readline().decode('ascii', errors='replace').strip()
            if header == 'PF':
                channels = 3
            elif header == 'Pf':
                channels = 1
            else:
                raise FileOperationError(path, f"malformed PFM header '{header[:16]}'")

            dims = f.readline().decode('ascii', errors='replace').split()
            scale_line = f.readline().decode('ascii', errors='replace').strip()
            try:
                width, height = int(dims[0]), int(dims[1])
                scale = float(scale_line)
            except (IndexError, ValueError):
                raise FileOperationError(path, "malformed PFM dimensions or scale")
            if len(dims) != 2 or scale == 0.0:
                raise FileOperationError(path, "malformed PFM dimensions or scale")
            if not (0 < width <= InputValidator.MAX_DIMENSION and 0 < height <= InputValidator.MAX_DIMENSION):
                raise FileOperationError(path, f"PFM dimensions {width}x{height} overflow the supported range")

            dtype = '<f4' if scale < 0 else '>f4'
            count = width * height * channels
            data = np.frombuffer(f.read(), dtype=dtype)
    except OSError as e:
        raise FileOperationError(path, "cannot read PFM", e)

    if data.size < count:
        raise FileOperationError(path, f"PFM data truncated: expected {count} samples, found {data.size}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data[:count].reshape(shape)).astype(np.float64)


def write_pfm(path, array: np.ndarray):
    """
    Write a 2-D or RGB array as little-endian PFM with scale -1.0.

    Samples are stored as float32 whatever the input dtype; reading back
    yields float64 values equal to ``array.astype(np.float32)``, so float32
    inputs round-trip bit-exactly and float64 inputs to within float32
    rounding.
    """
    path = Path(str(path))
    array = np.asarray(array)
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[:, :, 0]
    if array.ndim == 2:
        header = 'Pf'
    elif array.ndim == 3 and array.shape[2] == 3:
        header = 'PF'
    else:
        raise FileOperationError(path, f"cannot store array of shape {array.shape} as PFM")
    height, width = array.shape[:2]
    payload = np.ascontiguousarray(np.flipud(array).astype('<f4'))
    try:
        with open(path, 'wb') as f:
            f.write(f"{header}\n{width} {height}\n-1.0\n".encode('ascii'))
            f.write(payload.tobytes())
    except OSError as e:
        raise FileOperationError(path, "cannot write PFM", e)


def read_image(path) -> np.ndarray:
    """
    Read an image as float64 in [0, 1] (PNG/JPEG via Pillow, PFM as stored).

    Returns:
        2-D array for gray images, channel-last RGB otherwise
    """
    path = Path(str(path))
    result = InputValidator.validate_path(path, allowed_suffixes=InputValidator.IMAGE_SUFFIXES)
    if not result.is_valid:
        raise FileOperationError(path, "; ".join(result.errors))
    if path.suffix.lower() == '.pfm':
        return read_pfm(path)
    try:
        with Image.open(path) as image:
            if image.mode in ('I;16', 'I;16B', 'I'):
                return np.array(image).astype(np.float64) / 65535.0
            if image.mode not in ('L', 'RGB'):
                image = image.convert('RGB')
            return np.array(image).astype(np.float64) / 255.0
    except OSError as e:
        raise FileOperationError(path, "cannot decode image", e)


def write_png8(path, image: np.ndarray):
    """Write a [0, 1] gray or RGB image (or a boolean mask) as an 8-bit PNG."""
    path = Path(str(path))
    array = np.asarray(image, dtype=np.float64)
    encoded = np.rint(np.clip(np.nan_to_num(array), 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(encoded).save(path, format='PNG')
    except (OSError, ValueError) as e:
        raise FileOperationError(path, "cannot write PNG", e)


def read_mask_png(path) -> ConfidenceMap:
    """Read an 8-bit mask PNG as a binary confidence map."""
    return ConfidenceMap((to_single_channel(read_image(path)) >= 0.5).astype(np.float64))


def to_single_channel(image: np.ndarray) -> np.ndarray:
    return image.mean(axis=2) if image.ndim == 3 else image


def write_json(path, data: Dict[str, Any]):
    """Write a JSON document with sorted keys."""
    path = Path(str(path))
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, sort_keys=True)
    except OSError as e:
        raise FileOperationError(path, "cannot write JSON", e)
