import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from patchscope import container
from patchscope.errors import HeaderMismatchError, TruncatedFileError, UnsupportedFormatError

arrays = st.one_of(
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4)),
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5)),
    hnp.arrays(np.uint8, hnp.array_shapes(min_dims=1, max_dims=2, max_side=6)),
)


@given(st.dictionaries(st.text(min_size=1, max_size=8), arrays, max_size=4))
def test_roundtrip_is_bit_exact(records):
    back = container.loads(container.dumps(records))
    assert list(back) == list(records)
    for k, v in records.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()


def test_text_record():
    back = container.loads(container.dumps({"__config__": "kind=tiny\n"}))
    assert container.record_text(back["__config__"]) == "kind=tiny\n"


def test_known_layout():
    blob = container.dumps({"a": np.array([1.0], dtype=np.float32)})
    assert blob == b"PSCP1" + b"\x01\0\0\0" + b"\x01\0\0\0a" + b"\x04" + b"\x01\0\0\0" + b"\x01" + b"\0" * 7 + b"\0\0\x80\x3f"


def test_errors():
    blob = container.dumps({"w": np.zeros(3)})
    with pytest.raises(UnsupportedFormatError):
        container.loads(b"XXXXX" + blob[5:])
    with pytest.raises(TruncatedFileError):
        container.loads(blob[:-1])
    with pytest.raises(HeaderMismatchError):
        container.loads(blob + b"\0")
    with pytest.raises(UnsupportedFormatError):
        container.dumps({"i": np.zeros(2, dtype=np.int32)})
