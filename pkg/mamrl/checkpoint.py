# External module dependencies
from typing import Optional, Tuple, Dict
from pathlib import Path
import struct
import numpy as np

# Internal module dependencies
from .config import RunConfig, snapshot, load_snapshot
from .errors import (
    ConfigError,
    FormatError,
    VersionError,
    TruncatedError,
    ShapeMismatchError
)
from .model import Params, init_model
from .numerics import Array
from . import numerics as nx

###############################################################################
# Defaults
###############################################################################
MAGIC = b'MAMRLCKP'
VERSION = 1
TAG_DTYPES = { b'd' : np.dtype('<f8'), b'f' : np.dtype('<f4') }

###############################################################################
# Classes
###############################################################################
class _Reader:
    def __init__(self, data : bytes, path : Path):
        self._data = data
        self._offset = 0
        self._path = path

    def take(self, count : int) -> bytes:
        end = self._offset + count
        if end > len(self._data):
            raise TruncatedError('Checkpoint %s ends after %d bytes, expected more' % (
                self._path, len(self._data)
            ))
        chunk = self._data[self._offset:end]
        self._offset = end
        return chunk

    def unpack(self, fmt : str) -> Tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def at_end(self) -> bool:
        return self._offset == len(self._data)

###############################################################################
# Functions
###############################################################################
def save_checkpoint(params : Params, config : RunConfig, path : Path):
    parts = [ MAGIC, struct.pack('<I', VERSION) ]
    text = snapshot(config).encode('utf-8')
    parts += [ struct.pack('<I', len(text)), text ]
    arrays = nx.named_parameters(params)
    parts.append(struct.pack('<I', len(arrays)))
    for name, node in arrays:
        value = np.ascontiguousarray(node.value, dtype = node.dtype.newbyteorder('<'))
        tag = value.dtype.char.encode('ascii')
        if tag not in TAG_DTYPES:
            raise FormatError('Array %s has unsupported dtype %s' % (name, value.dtype))
        encoded = name.encode('utf-8')
        parts += [
            struct.pack('<H', len(encoded)), encoded,
            tag,
            struct.pack('<B', value.ndim),
            struct.pack('<%dI' % value.ndim, *value.shape),
            value.tobytes()
        ]
    path.parent.mkdir(parents = True, exist_ok = True)
    with path.open('wb+') as file:
        file.write(b''.join(parts))

def read_checkpoint(path : Path) -> Tuple[RunConfig, Dict[str, Array]]:
    with path.open('rb') as file: reader = _Reader(file.read(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise FormatError('%s is not a checkpoint file' % path)
    version, = reader.unpack('<I')
    if version != VERSION:
        raise VersionError('Checkpoint %s has format version %d, expected %d' % (
            path, version, VERSION
        ))
    length, = reader.unpack('<I')
    try: config = load_snapshot(reader.take(length).decode('utf-8'))
    except (UnicodeDecodeError, ConfigError) as error:
        raise FormatError('Checkpoint %s holds an unreadable config: %s' % (path, error))
    count, = reader.unpack('<I')
    arrays : Dict[str, Array] = dict()
    for _ in range(count):
        size, = reader.unpack('<H')
        name = reader.take(size).decode('utf-8')
        tag = reader.take(1)
        if tag not in TAG_DTYPES:
            raise FormatError('Array %s has unknown dtype tag %r' % (name, tag))
        dtype = TAG_DTYPES[tag]
        ndim, = reader.unpack('<B')
        shape = reader.unpack('<%dI' % ndim)
        data = reader.take(int(np.prod(shape, dtype = np.int64)) * dtype.itemsize)
        arrays[name] = np.frombuffer(data, dtype = dtype).reshape(shape).astype(
            dtype.newbyteorder('=')
        )
    if not reader.at_end():
        raise FormatError('Checkpoint %s has trailing bytes' % path)
    return config, arrays

def load_checkpoint(
    path : Path,
    expected : Optional[RunConfig] = None
    ) -> Tuple[Params, RunConfig]:
    """Parameters and config stored at path. The arrays are matched
    against a model built from expected (or from the stored config when
    not given); the first array whose name or shape differs is reported."""
    config, arrays = read_checkpoint(path)
    target = config if expected is None else expected
    skeleton = init_model(target.model, 0)
    names = [ name for name, _ in nx.named_parameters(skeleton) ]
    for name, node in nx.named_parameters(skeleton):
        if name not in arrays:
            raise ShapeMismatchError('Array %s is missing from %s' % (name, path))
        if arrays[name].shape != node.shape:
            raise ShapeMismatchError('Array %s has shape %s, expected %s' % (
                name, arrays[name].shape, node.shape
            ))
    for name in arrays:
        if name in names: continue
        raise ShapeMismatchError('Array %s is not part of the model' % name)
    return nx.map_parameters(skeleton, lambda name, _: arrays[name].copy()), config
