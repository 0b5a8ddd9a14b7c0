"""
Weight checkpoints and the snapshot-store manifest.

Checkpoint layout:

    magic        8 bytes   b'REGCKPT1'
    header_len   u32 LE
    header       YAML: format_version, precision, byte_order, backbone, tensors
    records      one per tensor, in header order:
                     ndim  u32 LE
                     dims  ndim x u32 LE
                     data  prod(dims) little-endian float32/float64 values
"""
import logging
import struct
from pathlib import Path
from typing import Mapping, Optional, Tuple

import numpy as np
import yaml

from .exceptions import FormatError
from .network import Backbone, BackboneConfig, WeightSet
from .volumes import PRECISION_DTYPES, pack_framed, unpack_framed, validate_document

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'REGCKPT1'
STORE_MANIFEST_NAME = 'manifest.yaml'

BACKBONE_SCHEMA = {
    'type': 'object',
    'required': ['spatial_dims', 'encoder_channels', 'decoder_channels', 'leaky_slope', 'kernel_size'],
    'properties': {
        'spatial_dims': {'enum': [2, 3]},
        'encoder_channels': {'type': 'array', 'items': {'type': 'integer', 'minimum': 1}, 'minItems': 2},
        'decoder_channels': {'type': 'array', 'items': {'type': 'integer', 'minimum': 1}, 'minItems': 1},
        'leaky_slope': {'type': 'number', 'exclusiveMinimum': 0, 'exclusiveMaximum': 1},
        'kernel_size': {'type': 'integer', 'minimum': 1},
        'flow_init_std': {'type': 'number', 'minimum': 0},
    },
}

CHECKPOINT_HEADER_SCHEMA = {
    'type': 'object',
    'required': ['format_version', 'precision', 'byte_order', 'backbone', 'tensors'],
    'properties': {
        'format_version': {'const': 1},
        'precision': {'enum': [32, 64]},
        'byte_order': {'enum': ['little']},
        'backbone': BACKBONE_SCHEMA,
        'tensors': {'type': 'array', 'items': {'type': 'string'}, 'minItems': 1},
    },
}

STORE_MANIFEST_SCHEMA = {
    'type': 'object',
    'required': ['format_version', 'backbone', 'integration_steps', 'loss', 'posterior', 'snapshots'],
    'properties': {
        'format_version': {'const': 1},
        'backbone': BACKBONE_SCHEMA,
        'integration_steps': {'type': 'integer', 'minimum': 1},
        'loss': {'type': 'object'},
        'posterior': {'type': 'object'},
        'snapshots': {
            'type': 'array',
            'minItems': 1,
            'items': {
                'type': 'object',
                'required': ['iteration', 'validation_loss', 'file'],
                'properties': {
                    'iteration': {'type': 'integer', 'minimum': 0},
                    'validation_loss': {'type': 'number'},
                    'weight': {'type': 'number'},
                    'file': {'type': 'string'},
                },
            },
        },
    },
}


def encode_checkpoint(weights: WeightSet, config: BackboneConfig, precision: Optional[int] = None) -> bytes:
    if precision is None:
        precision = 64 if weights.dtype == np.float64 else 32
    dtype = PRECISION_DTYPES[precision]
    header = {
        'format_version': 1,
        'precision': precision,
        'byte_order': 'little',
        'backbone': config.to_dict(),
        'tensors': weights.names,
    }
    chunks = [pack_framed(CHECKPOINT_MAGIC, header)]
    for _, array in weights.items():
        chunks.append(struct.pack('<I', array.ndim))
        chunks.append(np.asarray(array.shape, dtype='<u4').tobytes())
        chunks.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b''.join(chunks)


def decode_checkpoint(buffer: bytes) -> Tuple[WeightSet, BackboneConfig]:
    header, offset = unpack_framed(buffer, CHECKPOINT_MAGIC, CHECKPOINT_HEADER_SCHEMA, 'checkpoint')
    dtype = PRECISION_DTYPES[header['precision']]
    try:
        config = BackboneConfig.from_dict(header['backbone'])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"Checkpoint describes an invalid backbone: {exc}") from exc

    arrays = {}
    for name in header['tensors']:
        if len(buffer) < offset + 4:
            raise FormatError(f"Checkpoint truncated before tensor {name!r}.")
        (ndim,) = struct.unpack('<I', buffer[offset:offset + 4])
        offset += 4
        shape = tuple(int(n) for n in np.frombuffer(buffer, dtype='<u4', count=ndim, offset=offset))
        offset += 4 * ndim
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if len(buffer) < offset + nbytes:
            raise FormatError(f"Checkpoint truncated inside tensor {name!r}.")
        data = np.frombuffer(buffer, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        arrays[name] = data.reshape(shape).astype(dtype.newbyteorder('='))
        offset += nbytes
    if offset != len(buffer):
        raise FormatError(f"Checkpoint has {len(buffer) - offset} trailing bytes.")

    weights = WeightSet(arrays)
    check_layout(weights, config)
    return weights, config


def check_layout(weights: WeightSet, config: BackboneConfig) -> None:
    """Raise FormatError unless the tensors are exactly those the backbone expects."""
    backbone = Backbone(config)
    expected = {}
    for layer in backbone.layers:
        expected[f'{layer.name}.kernel'] = backbone.kernel_shape(layer)
        expected[f'{layer.name}.bias'] = (layer.out_channels,)
    actual = {name: array.shape for name, array in weights.items()}
    if actual != expected:
        missing = sorted(set(expected) - set(actual))
        wrong = sorted(name for name in set(expected) & set(actual) if expected[name] != actual[name])
        raise FormatError(f"Checkpoint does not match its backbone (missing {missing}, mis-shaped {wrong}).")


def save_checkpoint(path, weights: WeightSet, config: BackboneConfig, precision: Optional[int] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(weights, config, precision=precision))
    return path


def load_checkpoint(path) -> Tuple[WeightSet, BackboneConfig]:
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"Cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buffer)


def write_store_manifest(directory, manifest: Mapping) -> Path:
    validate_document(dict(manifest), STORE_MANIFEST_SCHEMA, 'snapshot manifest')
    path = Path(directory) / STORE_MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(dict(manifest), sort_keys=True), encoding='utf-8')
    return path


def read_store_manifest(directory) -> dict:
    path = Path(directory) / STORE_MANIFEST_NAME
    try:
        manifest = yaml.safe_load(path.read_text(encoding='utf-8'))
    except OSError as exc:
        raise FormatError(f"Cannot read snapshot manifest {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise FormatError(f"Unparseable snapshot manifest {path}: {exc}") from exc
    validate_document(manifest, STORE_MANIFEST_SCHEMA, 'snapshot manifest')
    return manifest
