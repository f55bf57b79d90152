import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bam.core import Alignment, CIState, DataError, Segment
from bam.mphone import (
    PAD,
    WORD_BOUNDARY,
    MPhoneKey,
    backoff_chain,
    check_phone_symbol,
    decode_key,
    encode_key,
    extract_maximal,
    fnv1a_64,
    order,
    phone_sequence,
    shard_of,
    shard_of_encoded,
    state_chain,
)

IH1 = CIState("ih", 1)
ACTION = MPhoneKey(IH1, ("sh", "k", "ae"), ("n", "sil"))


def reference_fnv1a_64(data: bytes) -> int:
    # written from the published FNV-1a definition, independently of the package
    h = 14695981039346656037
    for byte in data:
        h = ((h ^ byte) * 1099511628211) % 2**64
    return h


def uniform_alignment(symbols, frames_per_state=2):
    chain = state_chain(symbols)
    segs = tuple(
        Segment(s, k * frames_per_state, (k + 1) * frames_per_state, np.zeros(frames_per_state))
        for k, s in enumerate(chain)
    )
    return Alignment("u", segs)


class TestPhoneSequence:
    lexicon = {"action": ("ae", "k", "sh", "ih", "n"), "go": ("g", "ow")}

    def test_action(self):
        assert phone_sequence(["action"], self.lexicon) == "sil ae k sh ih n sil".split()

    def test_empty(self):
        assert phone_sequence([], self.lexicon) == ["sil", "sil"]

    def test_boundaries(self):
        assert phone_sequence(["action"], self.lexicon, True) == "sil | ae k sh ih n | sil".split()

    def test_boundaries_between_words(self):
        assert phone_sequence(["go", "go"], self.lexicon, True) == "sil | g ow | g ow | sil".split()

    def test_oov(self):
        with pytest.raises(DataError, match="vocabulary"):
            phone_sequence(["nope"], self.lexicon)


class TestExtractMaximal:
    symbols = "sil ae k sh ih n sil".split()

    def test_action_example(self):
        keys = extract_maximal(uniform_alignment(self.symbols), self.symbols, 3)
        key, span = keys[4 * 3]
        assert key == ACTION
        assert str(key) == "ih_1 / ae k sh ___ n sil"
        assert span == (24, 26)

    def test_order_zero(self):
        for key, _ in extract_maximal(uniform_alignment(self.symbols), self.symbols, 0):
            assert key.shape == (0, 0)

    def test_order_one_hand_enumeration(self):
        sym = ["sil", "a", "sil"]
        got = [(str(k.central), k.left, k.right) for k, _ in extract_maximal(uniform_alignment(sym), sym, 1)]
        expect = []
        for c, l, r in [("sil", (), ("a",)), ("a", ("sil",), ("sil",)), ("sil", ("a",), ())]:
            expect += [(f"{c}_{s}", l, r) for s in (1, 2, 3)]
        assert got == expect

    def test_word_boundary_is_context(self):
        sym = "sil | a | sil".split()
        keys = [k for k, _ in extract_maximal(uniform_alignment(sym), sym, 1)]
        assert keys[3] == MPhoneKey(CIState("a", 1), ("|",), ("|",))

    def test_state_mismatch(self):
        sym = ["sil", "a", "sil"]
        with pytest.raises(DataError):
            extract_maximal(uniform_alignment(["sil", "b", "sil"]), sym, 1)


class TestBackoff:
    def test_action_listing(self):
        chain = backoff_chain(ACTION)
        assert [str(k) for k in chain] == ["ih_1 / k sh ___ n sil", "ih_1 / sh ___ n"]

    def test_triphone_has_no_backoff(self):
        assert backoff_chain(MPhoneKey(IH1, ("a",), ("b",))) == []

    def test_left_edge(self):
        chain = backoff_chain(MPhoneKey(IH1, ("a", "b", "c"), ()))
        assert [k.shape for k in chain] == [(2, 0), (1, 0)]

    def test_right_edge(self):
        chain = backoff_chain(MPhoneKey(IH1, (), ("a", "b")))
        assert [k.shape for k in chain] == [(0, 1)]

    def test_skewed(self):
        chain = backoff_chain(MPhoneKey(IH1, ("a",), ("b", "c", "d")))
        assert [k.shape for k in chain] == [(1, 2), (1, 1)]

    @pytest.mark.parametrize(
        "key, expect", [(ACTION, 3), (MPhoneKey(IH1), 0), (MPhoneKey(IH1, ("sh",), ("n",)), 1)]
    )
    def test_order(self, key, expect):
        assert order(key) == expect


class TestEncoding:
    def test_action(self):
        assert encode_key(ACTION, 3) == "ih_1 / sh n k sil ae ~"

    def test_central_only(self):
        assert encode_key(MPhoneKey(IH1), 2) == "ih_1 / ~ ~ ~ ~"

    def test_partial(self):
        assert encode_key(MPhoneKey(IH1, ("sh", "k"), ("n", "sil")), 3) == "ih_1 / sh n k sil ~ ~"

    def test_decode_action(self):
        assert decode_key("ih_1 / sh n k sil ae ~", 3) == ACTION

    def test_decode_central_only(self):
        assert decode_key("ih_1 / ~ ~ ~ ~", 2) == MPhoneKey(IH1)

    def test_decode_rejects_symbol_after_pad(self):
        with pytest.raises(DataError):
            decode_key("ih_1 / ~ n a ~", 2)

    def test_decode_rejects_wrong_length(self):
        with pytest.raises(DataError):
            decode_key("ih_1 / a b", 2)

    def test_too_long_for_order(self):
        with pytest.raises(ValueError):
            encode_key(ACTION, 2)

    def test_symbol_bytes(self):
        check_phone_symbol("ae")
        for bad in ("a b", "x|", "~", ""):
            with pytest.raises(DataError):
                check_phone_symbol(bad)
        assert ord(WORD_BOUNDARY) < ord(PAD)


phones = st.sampled_from(["a", "b", "ch", "sil", "zz", "|"])


@st.composite
def keys(draw, max_order=3):
    M = draw(st.integers(1, max_order))
    left = draw(st.lists(phones, max_size=M))
    right = draw(st.lists(phones, max_size=M))
    central = CIState(draw(st.sampled_from(["a", "ih", "sil"])), draw(st.integers(1, 3)))
    return MPhoneKey(central, tuple(left), tuple(right)), M


class TestProperties:
    @given(keys())
    @settings(max_examples=300, deadline=None)
    def test_roundtrip(self, km):
        key, M = km
        assert decode_key(encode_key(key, M), M) == key

    @given(keys())
    @settings(max_examples=300, deadline=None)
    def test_backoffs_sort_after(self, km):
        key, M = km
        enc = encode_key(key, M).encode()
        prev = enc
        for b in backoff_chain(key):
            eb = encode_key(b, M).encode()
            assert eb > enc and eb > prev
            prev = eb

    @given(keys())
    @settings(max_examples=300, deadline=None)
    def test_chain_orders_non_increasing_and_shapes_shrink(self, km):
        key, _ = km
        chain = [key, *backoff_chain(key)]
        sizes = [sum(k.shape) for k in chain]
        assert all(a > b for a, b in zip(sizes, sizes[1:]))
        orders = [order(k) for k in chain]
        assert all(a >= b for a, b in zip(orders, orders[1:]))

    @given(keys(), st.integers(1, 64))
    @settings(max_examples=300, deadline=None)
    def test_backoffs_colocate(self, km, S):
        key, M = km
        s = shard_of(key, S, M)
        assert 0 <= s < S
        for b in backoff_chain(key):
            assert shard_of(b, S, M) == s
            assert shard_of_encoded(encode_key(b, M), S) == s
        assert shard_of_encoded(encode_key(key, M), S) == s


class TestSharding:
    def test_single_shard(self):
        assert shard_of(ACTION, 1, 3) == 0

    def test_fnv_known_vectors(self):
        assert fnv1a_64(b"") == 0xCBF29CE484222325
        assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C

    def test_fnv_against_independent(self):
        data = b"ih_1 / sh n ~ ~ ~ ~"
        assert fnv1a_64(data) == reference_fnv1a_64(data)
        assert shard_of(ACTION, 7, 3) == reference_fnv1a_64(data) % 7

    def test_order_two_prefix(self):
        enc = encode_key(MPhoneKey(IH1, ("sh", "k"), ("n",)), 2)
        assert shard_of_encoded(enc, 5) == reference_fnv1a_64(b"ih_1 / sh n ~ ~") % 5
