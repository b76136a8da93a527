"""Timestamp stream files.

Binary ``.tbts`` layout (little-endian): magic ``b"TBTS"``, version ``u16``,
detector id ``u8`` (0 signal, 1 idler), count ``u64``, then ``count`` x ``u64``
picosecond times.  ``.txt`` holds one decimal time per line; ``#`` lines and
blank lines are ignored on read.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .montecarlo import DETECTORS, TimestampStream

MAGIC = b"TBTS"
VERSION = 1
_HEADER = struct.Struct("<4sHBQ")


def write_stream(path, stream: TimestampStream) -> None:
    path = Path(path)
    times = np.asarray(stream.times_ps, dtype="<u8")
    if path.suffix == ".tbts":
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, DETECTORS.index(stream.detector_id),
                                  len(times)))
            fh.write(times.tobytes())
    elif path.suffix == ".txt":
        with open(path, "w") as fh:
            fh.writelines(f"{int(t)}\n" for t in stream.times_ps)
    else:
        raise ConfigError(f"unknown stream format {path.suffix!r} (use .tbts or .txt)")


def read_stream(path, detector_id: Optional[str] = None) -> TimestampStream:
    """Load a stream; ``detector_id`` is required for ``.txt`` files only."""
    path = Path(path)
    if path.suffix == ".tbts":
        data = path.read_bytes()
        if len(data) < _HEADER.size:
            raise ConfigError(f"{path}: truncated header")
        magic, version, det, count = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ConfigError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise ConfigError(f"{path}: unsupported version {version}")
        if det >= len(DETECTORS):
            raise ConfigError(f"{path}: bad detector id {det}")
        body = data[_HEADER.size:]
        if len(body) != 8 * count:
            raise ConfigError(f"{path}: expected {count} timestamps")
        times = np.frombuffer(body, dtype="<u8").astype(np.int64)
        found = DETECTORS[det]
        if detector_id is not None and detector_id != found:
            raise ConfigError(f"{path}: holds {found} events, not {detector_id}")
        detector_id = found
    elif path.suffix == ".txt":
        values = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                try:
                    values.append(int(line))
                except ValueError:
                    raise ConfigError(f"{path}:{lineno}: not an integer timestamp") from None
        times = np.array(values, dtype=np.int64)
        detector_id = detector_id or "signal"
    else:
        raise ConfigError(f"unknown stream format {path.suffix!r} (use .tbts or .txt)")
    span = int(times[-1]) if len(times) else 0
    return TimestampStream(detector_id, times, span)
