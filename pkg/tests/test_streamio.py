import struct

import numpy as np
import pytest

from tbtwin.errors import ConfigError
from tbtwin.montecarlo import TimestampStream
from tbtwin.streamio import read_stream, write_stream


@pytest.fixture
def stream():
    return TimestampStream("idler", [0, 5, 5, 2 ** 40, 2 ** 40 + 7], 2 ** 41)


def test_binary_roundtrip(tmp_path, stream):
    path = tmp_path / "i.tbts"
    write_stream(path, stream)
    back = read_stream(path)
    assert back.detector_id == "idler"
    np.testing.assert_array_equal(back.times_ps, stream.times_ps)


def test_binary_layout(tmp_path, stream):
    path = tmp_path / "i.tbts"
    write_stream(path, stream)
    raw = path.read_bytes()
    assert raw[:4] == b"TBTS"
    assert struct.unpack_from("<HBQ", raw, 4) == (1, 1, 5)
    assert len(raw) == 4 + 2 + 1 + 8 + 5 * 8
    assert struct.unpack_from("<Q", raw, 15 + 3 * 8)[0] == 2 ** 40


def test_text_roundtrip(tmp_path, stream):
    path = tmp_path / "i.txt"
    write_stream(path, stream)
    with open(path, "a") as fh:
        fh.write("\n# trailing comment\n")
    back = read_stream(path, "idler")
    np.testing.assert_array_equal(back.times_ps, stream.times_ps)


def test_bad_files(tmp_path, stream):
    bad = tmp_path / "x.tbts"
    bad.write_bytes(b"NOPE" + bytes(11))
    with pytest.raises(ConfigError):
        read_stream(bad)
    good = tmp_path / "g.tbts"
    write_stream(good, stream)
    with pytest.raises(ConfigError):
        read_stream(good, "signal")
    trunc = tmp_path / "t.tbts"
    trunc.write_bytes(good.read_bytes()[:-3])
    with pytest.raises(ConfigError):
        read_stream(trunc)
    txt = tmp_path / "b.txt"
    txt.write_text("12\nabc\n")
    with pytest.raises(ConfigError, match=":2:"):
        read_stream(txt)
    with pytest.raises(ConfigError):
        write_stream(tmp_path / "x.csv", stream)
