import base64
import itertools
import json

import numpy as np
import pytest

from usamkit.backend import SyntheticWorld, synthetic_sample_set
from usamkit.io import (
    RecordFormatError,
    decode_sample_set,
    encode_sample_set,
    iter_records,
    read_records,
    rle_decode,
    rle_encode,
    write_records,
)


def assert_same_set(a, b):
    assert a.image_id == b.image_id and a.n_prompts == b.n_prompts
    assert np.array_equal(a.gt, b.gt)
    assert len(a.records) == len(b.records)
    for ra, rb in zip(a.records, b.records):
        assert ra.config == rb.config
        assert np.float32(ra.sam_score) == np.float32(rb.sam_score) or ra.sam_score == rb.sam_score
        assert np.array_equal(ra.mask.astype(np.float32), rb.mask.astype(np.float32))
        assert np.array_equal(ra.tokens.astype(np.float32), rb.tokens.astype(np.float32))


class TestRle:
    def test_all_background(self):
        assert rle_encode(np.zeros((2, 3), bool)) == [6]

    def test_all_foreground(self):
        assert rle_encode(np.ones((1, 6), bool)) == [0, 6]

    def test_pattern(self):
        m = np.array([[0, 1, 1, 0, 1, 0]], bool)
        assert rle_encode(m) == [1, 2, 1, 1, 1]

    def test_exhaustive_1x6(self):
        for bits in itertools.product([False, True], repeat=6):
            m = np.array([bits])
            counts = rle_encode(m)
            assert sum(counts) == 6
            assert np.array_equal(rle_decode(counts, 1, 6), m)

    def test_random_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            h, w = rng.integers(1, 20, 2)
            m = rng.random((h, w)) < rng.random()
            assert np.array_equal(rle_decode(rle_encode(m), h, w), m)

    def test_decode_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            rle_decode([2, 3], 1, 6)
        with pytest.raises(ValueError):
            rle_decode([7, -1], 1, 6)


@pytest.fixture(scope="module")
def sets():
    world = SyntheticWorld()
    return [synthetic_sample_set(world, k, n_prompts=2, grid="identity")[0] for k in range(10)]


class TestRecordFile:
    def test_empty_file(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert read_records(tmp_path / "e.jsonl") == []

    def test_round_trip(self, tmp_path, sets):
        path = tmp_path / "r.jsonl"
        write_records(path, sets, {"note": "x"})
        back = read_records(path)
        assert len(back) == 10
        for a, b in zip(sets, back):
            assert_same_set(a, b)
        header = json.loads(path.read_text().splitlines()[0])
        assert header["schema_version"] == 1 and header["note"] == "x"

    def test_rewrite_is_byte_identical(self, tmp_path, sets):
        write_records(tmp_path / "a.jsonl", sets)
        write_records(tmp_path / "b.jsonl", read_records(tmp_path / "a.jsonl"))
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_streaming(self, tmp_path, sets):
        write_records(tmp_path / "s.jsonl", sets)
        it = iter_records(tmp_path / "s.jsonl")
        assert next(it).image_id == sets[0].image_id

    def _line(self, sets):
        return encode_sample_set(sets[0])

    def test_short_tokens_named(self, sets):
        obj = self._line(sets)
        obj["records"][3]["tokens_b64"] = base64.b64encode(np.zeros(511, "<f4").tobytes()).decode()
        with pytest.raises(RecordFormatError) as exc:
            decode_sample_set(obj, line=2)
        assert "tokens" in str(exc.value) and "line 2" in str(exc.value)
        assert exc.value.field == "records[3].tokens"

    @pytest.mark.parametrize("mutate,field", [
        (lambda o: o.pop("gt_rle"), "gt_rle"),
        (lambda o: o.__setitem__("height", "32"), "height"),
        (lambda o: o["records"][0].__setitem__("aug", "rotate"), "records[0].aug"),
        (lambda o: o["records"][0].__setitem__("model", "XL"), "records[0].model"),
        (lambda o: o["records"][0].__setitem__("head", 3), "records[0].head"),
        (lambda o: o["records"][0].__setitem__("prompt_index", 9), "records[0].prompt_index"),
        (lambda o: o["records"][0].__setitem__("mask_b64", "!!"), "records[0].mask_b64"),
        (lambda o: o["records"][1].__setitem__("head", 0), "records[1].head"),
    ])
    def test_errors_name_the_field(self, sets, mutate, field):
        obj = self._line(sets)
        mutate(obj)
        with pytest.raises(RecordFormatError) as exc:
            decode_sample_set(obj, line=5)
        assert exc.value.field == field and exc.value.line == 5

    def test_missing_head(self, sets):
        obj = self._line(sets)
        del obj["records"][0]
        with pytest.raises(RecordFormatError):
            decode_sample_set(obj)

    def test_invalid_json_line(self, tmp_path):
        (tmp_path / "x.jsonl").write_text('{"schema_version": 1}\n{oops\n')
        with pytest.raises(RecordFormatError) as exc:
            read_records(tmp_path / "x.jsonl")
        assert exc.value.line == 2

    def test_schema_version(self, tmp_path):
        (tmp_path / "v.jsonl").write_text('{"schema_version": 99}\n')
        with pytest.raises(RecordFormatError):
            read_records(tmp_path / "v.jsonl")
