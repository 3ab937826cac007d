import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcal.io import (
    FormatError,
    MissingFileError,
    decode_sample_set,
    dump_json,
    encode_sample_set,
    read_json,
    read_sample_set,
    sample_set_from_json,
    sample_set_to_json,
    write_json,
    write_sample_set,
)
from fedcal.sampling import PosteriorSampleSet


def sample_set(count=3, dim=5, seed=0):
    rng = np.random.default_rng(seed)
    return PosteriorSampleSet(list(rng.standard_normal((count, dim))), 2, "fp1234", seed)


class TestFcss:
    @given(st.integers(1, 6), st.integers(1, 40), st.integers(0, 2**31 - 1), st.integers(-5, 5))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_is_bit_exact(self, count, dim, seed, client):
        rng = np.random.default_rng(seed)
        s = PosteriorSampleSet(list(rng.standard_normal((count, dim)) * 1e3), client, "abc", seed)
        blob = encode_sample_set(s)
        back = decode_sample_set(blob)
        assert back.as_array().tobytes() == s.as_array().tobytes()
        assert (back.client_id, back.fingerprint, back.seed) == (client, "abc", seed)
        assert encode_sample_set(back) == blob

    def test_header_layout(self):
        blob = encode_sample_set(sample_set(2, 3))
        assert blob[:4] == b"FCSS"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert len(blob) == 4 + 4 + 4 + 6 + 8 + 8 + 4 + 4 + 2 * 3 * 8

    def test_corruption_detected(self):
        blob = encode_sample_set(sample_set())
        with pytest.raises(FormatError):
            decode_sample_set(b"XXXX" + blob[4:])
        with pytest.raises(FormatError):
            decode_sample_set(blob[:-1])
        with pytest.raises(FormatError):
            decode_sample_set(blob[:4] + (2).to_bytes(4, "little") + blob[8:])

    def test_json_form(self):
        s = sample_set()
        back = sample_set_from_json(sample_set_to_json(s))
        np.testing.assert_array_equal(back.as_array(), s.as_array())
        with pytest.raises(FormatError):
            sample_set_from_json('{"format": "other"}')

    @pytest.mark.parametrize("name", ["s.fcss", "s.json"])
    def test_file_round_trip(self, tmp_path, name):
        p = write_sample_set(tmp_path / "sub" / name, sample_set())
        first = p.read_bytes()
        write_sample_set(p, read_sample_set(p))
        assert p.read_bytes() == first

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(MissingFileError) as info:
            read_sample_set(tmp_path / "nope.fcss")
        assert info.value.filename.endswith("nope.fcss")
        assert "nope.fcss" in str(info.value)


class TestJson:
    def test_canonical(self, tmp_path):
        p = write_json(tmp_path / "a.json", {"b": 1, "a": [1.5, None]})
        assert p.read_text() == dump_json({"a": [1.5, None], "b": 1})
        write_json(p, read_json(p))
        assert p.read_text() == dump_json({"a": [1.5, None], "b": 1})
        assert p.read_text().endswith("\n")

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            dump_json({"x": float("nan")})
