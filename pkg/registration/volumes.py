"""
Volume file I/O, preprocessing, preview renders and the dataset manifest.

A volume file is

    magic        8 bytes   b'REGVOL01'
    header_len   u32 LE
    header       YAML (dims, components, precision, byte_order[, role])
    payload      raw little-endian float32/float64, C order,
                 shape dims when components == 1, else (components, *dims)
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import jsonschema
import numpy as np
import yaml

from .exceptions import FormatError, ShapeError

logger = logging.getLogger(__name__)

VOLUME_MAGIC = b'REGVOL01'
SPLITS = ('train', 'val', 'test')

PRECISION_DTYPES = {32: np.dtype('<f4'), 64: np.dtype('<f8')}

VOLUME_HEADER_SCHEMA = {
    'type': 'object',
    'required': ['dims', 'components', 'precision', 'byte_order'],
    'properties': {
        'dims': {'type': 'array', 'items': {'type': 'integer', 'minimum': 1}, 'minItems': 1},
        'components': {'type': 'integer', 'minimum': 1},
        'precision': {'enum': [32, 64]},
        'byte_order': {'enum': ['little']},
        'role': {'type': 'string'},
    },
}

DATASET_MANIFEST_SCHEMA = {
    'type': 'object',
    'required': ['format_version', 'shape', 'pairs'],
    'properties': {
        'format_version': {'const': 1},
        'shape': {'type': 'array', 'items': {'type': 'integer', 'minimum': 1}, 'minItems': 2, 'maxItems': 3},
        'pairs': {
            'type': 'array',
            'minItems': 1,
            'items': {
                'type': 'object',
                'required': ['id', 'split', 'moving', 'fixed'],
                'properties': {
                    'id': {'type': 'string'},
                    'split': {'enum': list(SPLITS)},
                    'moving': {'type': 'string'},
                    'fixed': {'type': 'string'},
                    'ground_truth': {'type': 'string'},
                    'masks': {
                        'type': 'array',
                        'items': {
                            'type': 'object',
                            'required': ['label', 'moving', 'fixed'],
                            'properties': {
                                'label': {'type': 'integer'},
                                'moving': {'type': 'string'},
                                'fixed': {'type': 'string'},
                            },
                        },
                    },
                },
            },
        },
    },
}


def validate_document(document, schema: Mapping, what: str) -> None:
    """Check a parsed header or manifest against its JSON schema."""
    try:
        jsonschema.validate(instance=document, schema=schema)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"Invalid {what}: {exc.message}") from exc


def pack_framed(magic: bytes, header: Mapping) -> bytes:
    """Magic bytes, a u32 little-endian header length and the YAML header."""
    encoded = yaml.safe_dump(dict(header), sort_keys=True).encode('utf-8')
    return magic + struct.pack('<I', len(encoded)) + encoded


def unpack_framed(buffer: bytes, magic: bytes, schema: Mapping, what: str) -> Tuple[dict, int]:
    """
    Parse the framing written by `pack_framed`.

    Returns:
        tuple: The validated header and the offset of the first payload byte.
    """
    prefix = len(magic) + 4
    if len(buffer) < prefix or buffer[:len(magic)] != magic:
        raise FormatError(f"Not a {what}: bad magic bytes.")
    (length,) = struct.unpack('<I', buffer[len(magic):prefix])
    if len(buffer) < prefix + length:
        raise FormatError(f"Truncated {what} header.")
    try:
        header = yaml.safe_load(buffer[prefix:prefix + length].decode('utf-8'))
    except (yaml.YAMLError, UnicodeDecodeError) as exc:
        raise FormatError(f"Unreadable {what} header: {exc}") from exc
    validate_document(header, schema, f"{what} header")
    return header, prefix + length


@dataclass
class VolumeFile:
    header: dict
    data: np.ndarray

    @property
    def components(self) -> int:
        return self.header['components']

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.header['dims'])


def encode_volume(array: np.ndarray, components: int = 1, precision: Optional[int] = None,
                  role: Optional[str] = None) -> bytes:
    array = np.asarray(array)
    if precision is None:
        precision = 64 if array.dtype == np.float64 else 32
    if precision not in PRECISION_DTYPES:
        raise FormatError(f"Unsupported precision {precision}.")
    if components > 1:
        if array.shape[0] != components:
            raise ShapeError(f"Array of shape {array.shape} does not hold {components} components.")
        dims = array.shape[1:]
    else:
        dims = array.shape
    header = {
        'dims': [int(n) for n in dims],
        'components': int(components),
        'precision': precision,
        'byte_order': 'little',
    }
    if role:
        header['role'] = role
    payload = np.ascontiguousarray(array, dtype=PRECISION_DTYPES[precision]).tobytes()
    return pack_framed(VOLUME_MAGIC, header) + payload


def decode_volume(buffer: bytes) -> VolumeFile:
    header, offset = unpack_framed(buffer, VOLUME_MAGIC, VOLUME_HEADER_SCHEMA, 'volume file')
    dtype = PRECISION_DTYPES[header['precision']]
    dims = tuple(header['dims'])
    components = header['components']
    expected = int(np.prod(dims)) * components * dtype.itemsize
    if len(buffer) - offset != expected:
        raise FormatError(
            f"Volume payload holds {len(buffer) - offset} bytes, header promises {expected}."
        )
    data = np.frombuffer(buffer, dtype=dtype, offset=offset)
    shape = dims if components == 1 else (components,) + dims
    return VolumeFile(header=header, data=data.reshape(shape).astype(dtype.newbyteorder('=')))


def write_volume(path, array: np.ndarray, components: int = 1, precision: Optional[int] = None,
                 role: Optional[str] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_volume(array, components=components, precision=precision, role=role))
    return path


def write_field(path, field_array: np.ndarray, precision: Optional[int] = None, role: str = 'field') -> Path:
    """Write a `(D, *S)` vector field; the component count D goes into the header."""
    field_array = np.asarray(field_array)
    return write_volume(path, field_array, components=field_array.shape[0], precision=precision, role=role)


def read_volume_file(path) -> VolumeFile:
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"Cannot read volume {path}: {exc}") from exc
    return decode_volume(buffer)


def read_volume(path) -> np.ndarray:
    return read_volume_file(path).data


def _crop_or_pad_slices(source: int, target: int) -> Tuple[slice, slice]:
    if source >= target:
        start = (source - target) // 2
        return slice(start, start + target), slice(0, target)
    start = (target - source) // 2
    return slice(0, source), slice(start, start + source)


def preprocess(volume, target_shape: Sequence[int]) -> np.ndarray:
    """
    Center-crop to `target_shape`, min-max normalise to [0, 1], then zero-pad
    where the volume is smaller than the target.

    A constant volume normalises to all zeros and logs a warning.
    """
    array = np.asarray(volume, dtype=np.float64)
    target_shape = tuple(int(n) for n in target_shape)
    if len(target_shape) != array.ndim:
        raise ShapeError(f"Cannot fit a {array.ndim}-D volume into target shape {target_shape}.")
    if any(n < 1 for n in target_shape):
        raise ShapeError(f"Target shape {target_shape} has a zero extent.")

    slices = [_crop_or_pad_slices(n, m) for n, m in zip(array.shape, target_shape)]
    cropped = array[tuple(src for src, _ in slices)]

    low, high = cropped.min(), cropped.max()
    if high > low:
        normalised = (cropped - low) / (high - low)
    else:
        logger.warning("Constant volume (value %s); normalised to zeros.", low)
        normalised = np.zeros_like(cropped)

    out = np.zeros(target_shape, dtype=np.float64)
    out[tuple(dst for _, dst in slices)] = normalised
    return out


def write_pgm(path, image) -> Path:
    """
    Render a volume as an 8-bit binary portable graymap. 3-D volumes are rendered
    through their central slice along the first axis.
    """
    array = np.asarray(image, dtype=np.float64)
    if array.ndim == 3:
        array = array[array.shape[0] // 2]
    if array.ndim != 2:
        raise ShapeError(f"Cannot render an array of shape {array.shape} as an image.")
    low, high = array.min(), array.max()
    scaled = (array - low) / (high - low) if high > low else np.zeros_like(array)
    pixels = np.round(scaled * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = pixels.shape
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode('ascii') + pixels.tobytes())
    return path


@dataclass
class ImagePair:
    """
    One registration pair together with its label masks and, for synthetic
    data, the ground-truth deformation that maps the moving image onto the fixed one.
    """
    pair_id: str
    moving: np.ndarray
    fixed: np.ndarray
    moving_masks: Dict[int, np.ndarray] = field(default_factory=dict)
    fixed_masks: Dict[int, np.ndarray] = field(default_factory=dict)
    ground_truth: Optional[np.ndarray] = None

    @property
    def labels(self) -> List[int]:
        return sorted(set(self.moving_masks) & set(self.fixed_masks))


@dataclass
class Dataset:
    root: Path
    shape: Tuple[int, ...]
    splits: Dict[str, List[ImagePair]]
    metadata: dict = field(default_factory=dict)

    @property
    def train(self) -> List[ImagePair]:
        return self.splits.get('train', [])

    @property
    def val(self) -> List[ImagePair]:
        return self.splits.get('val', [])

    @property
    def test(self) -> List[ImagePair]:
        return self.splits.get('test', [])

    def __len__(self) -> int:
        return sum(len(pairs) for pairs in self.splits.values())


def save_pair(directory, pair: ImagePair, split: str) -> dict:
    """Write the volumes of one pair below `directory` and return its manifest entry."""
    directory = Path(directory)
    folder = directory / pair.pair_id
    write_volume(folder / 'moving.vol', pair.moving, role='image')
    write_volume(folder / 'fixed.vol', pair.fixed, role='image')
    entry = {
        'id': pair.pair_id,
        'split': split,
        'moving': f'{pair.pair_id}/moving.vol',
        'fixed': f'{pair.pair_id}/fixed.vol',
        'masks': [],
    }
    for label in pair.labels:
        write_volume(folder / f'moving_mask_{label}.vol', pair.moving_masks[label], role='mask')
        write_volume(folder / f'fixed_mask_{label}.vol', pair.fixed_masks[label], role='mask')
        entry['masks'].append({
            'label': int(label),
            'moving': f'{pair.pair_id}/moving_mask_{label}.vol',
            'fixed': f'{pair.pair_id}/fixed_mask_{label}.vol',
        })
    if pair.ground_truth is not None:
        write_field(folder / 'ground_truth.vol', pair.ground_truth)
        entry['ground_truth'] = f'{pair.pair_id}/ground_truth.vol'
    return entry


def write_dataset_manifest(path, shape: Sequence[int], entries: List[dict], metadata: Optional[Mapping] = None) -> Path:
    document = dict(metadata or {})
    document.update({
        'format_version': 1,
        'shape': [int(n) for n in shape],
        'pairs': entries,
    })
    validate_document(document, DATASET_MANIFEST_SCHEMA, 'dataset manifest')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(document, sort_keys=True), encoding='utf-8')
    return path


def read_dataset_manifest(path) -> dict:
    path = Path(path)
    try:
        document = yaml.safe_load(path.read_text(encoding='utf-8'))
    except OSError as exc:
        raise FormatError(f"Cannot read dataset manifest {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise FormatError(f"Unparseable dataset manifest {path}: {exc}") from exc
    validate_document(document, DATASET_MANIFEST_SCHEMA, 'dataset manifest')
    return document


def load_dataset(path, splits: Optional[Sequence[str]] = None) -> Dataset:
    """
    Load every pair listed in a dataset manifest, grouped by split.

    Args:
        path: The manifest file.
        splits (Sequence[str] | None): Restrict loading to these splits.

    Raises:
        FormatError: For a malformed manifest, or volumes that do not match its shape.
    """
    path = Path(path)
    document = read_dataset_manifest(path)
    root = path.parent
    shape = tuple(document['shape'])
    grouped: Dict[str, List[ImagePair]] = {name: [] for name in SPLITS}

    for entry in document['pairs']:
        if splits is not None and entry['split'] not in splits:
            continue
        pair = ImagePair(
            pair_id=entry['id'],
            moving=read_volume(root / entry['moving']),
            fixed=read_volume(root / entry['fixed']),
            moving_masks={m['label']: read_volume(root / m['moving']) for m in entry.get('masks', [])},
            fixed_masks={m['label']: read_volume(root / m['fixed']) for m in entry.get('masks', [])},
            ground_truth=read_volume(root / entry['ground_truth']) if 'ground_truth' in entry else None,
        )
        if pair.moving.shape != shape or pair.fixed.shape != shape:
            raise FormatError(
                f"Pair {pair.pair_id} has volumes of shape {pair.moving.shape}/{pair.fixed.shape}, "
                f"manifest declares {shape}."
            )
        grouped[entry['split']].append(pair)

    metadata = {key: value for key, value in document.items() if key not in ('pairs', 'shape', 'format_version')}
    return Dataset(root=root, shape=shape, splits=grouped, metadata=metadata)
