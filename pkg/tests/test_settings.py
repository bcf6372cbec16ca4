"""
Tests for seeds, checksums, the output envelope and ordered parallel maps.
"""

import numpy as np

from utils.settings import (SEED_MODULUS, as_seed, build_envelope, canonical_json,
                            checksum, chunk_ranges, derive_seed, ordered_map, to_jsonable)


class TestSeeds:
    def test_stable_and_key_sensitive(self):
        assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
        assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)
        assert derive_seed(0, 1) != derive_seed(1, 1)

    def test_negative_seeds_wrap_into_unsigned_range(self):
        assert as_seed(-1) == SEED_MODULUS - 1
        assert as_seed(SEED_MODULUS - 1) == SEED_MODULUS - 1
        assert derive_seed(-1, 3) == derive_seed(SEED_MODULUS - 1, 3)
        assert 0 <= derive_seed(-(2 ** 63), 0) < SEED_MODULUS


class TestJson:
    def test_numpy_values(self):
        payload = {"a": np.arange(3), "b": np.float64(0.5), "c": np.bool_(True), "d": float("nan")}
        assert to_jsonable(payload) == {"a": [0, 1, 2], "b": 0.5, "c": True, "d": None}

    def test_checksum_ignores_key_order(self):
        assert canonical_json({"b": 1, "a": 2}) == canonical_json({"a": 2, "b": 1})
        assert checksum({"b": 1, "a": 2}) == checksum({"a": 2, "b": 1})

    def test_envelope(self):
        envelope = build_envelope(5, {"M": 10}, "abc", {"explain": 1.5})
        assert envelope["tool"] == "svehnn-explain"
        assert envelope["seed"] == 5
        assert envelope["volatile"]["wall_clock_s"] == {"explain": 1.5}
        assert set(envelope) == {"tool", "tool_version", "seed", "config", "model_checksum", "volatile"}


class TestOrderedMap:
    def test_order_matches_items(self):
        items = list(range(50))
        assert ordered_map(lambda x: x * x, items, threads=4) == [x * x for x in items]

    def test_chunks_cover_range(self):
        assert chunk_ranges(10, 4) == [(0, 4), (4, 8), (8, 10)]
        assert chunk_ranges(0, 4) == []
