import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from youpi import errors
from youpi.fitsio import (
    BLOCK_SIZE,
    CARD_SIZE,
    FitsCard,
    parse_fits_header,
    read_fits_header,
    serialize_header,
)
from youpi.instruments import extract_image_meta, get_profile


def raw_card(text: str) -> bytes:
    """Independent card builder: plain 80-byte padding, no youpi code."""
    assert len(text) <= CARD_SIZE
    return text.ljust(CARD_SIZE).encode("ascii")


def raw_value_card(keyword: str, value_text: str) -> bytes:
    return raw_card(f"{keyword:<8}= {value_text}")


def pad_to_block(data: bytes) -> bytes:
    while len(data) % BLOCK_SIZE:
        data += b" " * CARD_SIZE
    return data


def test_minimal_legal_header():
    data = pad_to_block(raw_value_card("SIMPLE", "T".rjust(20)) + raw_card("END"))
    assert len(data) == BLOCK_SIZE
    header = parse_fits_header(data)
    assert len(header.cards) == 2
    assert header.cards[0].keyword == "SIMPLE"
    assert header.cards[0].value is True
    assert header.cards[1].keyword == "END"
    assert header.raw_block_count == 1


def test_missing_end_raises():
    data = pad_to_block(raw_value_card("SIMPLE", "T"))
    with pytest.raises(errors.MissingEnd):
        parse_fits_header(data)


def test_forty_value_cards_span_two_blocks():
    # fixture: 40 value cards + END, counted by an independent 80-byte slicer
    raw = b"".join(raw_value_card(f"KEY{i:04d}", str(i).rjust(20)) for i in range(40))
    raw += raw_card("END")
    data = pad_to_block(raw)

    slices = [data[i : i + CARD_SIZE] for i in range(0, len(data), CARD_SIZE)]
    oracle_meaningful = 0
    oracle_blocks = None
    for index, chunk in enumerate(slices):
        if chunk.strip() == b"":
            continue
        oracle_meaningful += 1
        if chunk[:3] == b"END":
            oracle_blocks = index // 36 + 1
            break
    assert oracle_meaningful == 41
    assert oracle_blocks == 2

    header = parse_fits_header(data)
    assert len(header.cards) == oracle_meaningful
    assert header.raw_block_count == oracle_blocks
    assert header.byte_size == 2 * BLOCK_SIZE


def test_truncated_block():
    data = raw_value_card("SIMPLE", "T") + raw_card("MORE")  # 160 bytes, no END
    with pytest.raises(errors.TruncatedBlock):
        parse_fits_header(data)


def test_malformed_keyword():
    data = pad_to_block(raw_value_card("bad key", "1") + raw_card("END"))
    with pytest.raises(errors.MalformedCard):
        parse_fits_header(data)


def test_parse_stops_at_end_block():
    first = pad_to_block(raw_value_card("SIMPLE", "T") + raw_card("END"))
    junk = b"\xff" * (BLOCK_SIZE + 123)  # would be malformed if ever read
    header = parse_fits_header(first + junk)
    assert header.raw_block_count == 1
    assert header.byte_size == BLOCK_SIZE


def test_value_parsing_variants():
    data = pad_to_block(
        raw_value_card("LOGICAL", "F".rjust(20))
        + raw_value_card("INT", "-42".rjust(20))
        + raw_value_card("REAL", "3.5".rjust(20))
        + raw_value_card("STR", "'hello '")
        + raw_value_card("QUOTED", "'it''s'")
        + raw_value_card("EMPTY", "")
        + raw_value_card("CMT", "7 / some comment")
        + raw_card("COMMENT this is commentary")
        + raw_card("END")
    )
    header = parse_fits_header(data)
    assert header.value("LOGICAL") is False
    assert header.value("INT") == -42
    assert header.value("REAL") == 3.5
    assert header.value("STR") == "hello"
    assert header.value("QUOTED") == "it's"
    assert header.value("EMPTY") is None
    card = header.get("CMT")
    assert card.value == 7
    assert card.comment == "some comment"
    commentary = [c for c in header.cards if c.keyword == "COMMENT"]
    assert commentary and commentary[0].comment == "this is commentary"


def test_read_fits_header_from_stream(tmp_path):
    data = pad_to_block(raw_value_card("SIMPLE", "T") + raw_card("END"))
    path = tmp_path / "x.fits"
    path.write_bytes(data + b"\x00" * 512)  # trailing data block is never read
    with open(path, "rb") as fh:
        header = read_fits_header(fh)
    assert header.raw_block_count == 1


keyword_st = st.text(
    alphabet=string.ascii_uppercase + string.digits + "_-", min_size=1, max_size=8
).filter(lambda s: s not in ("END", "COMMENT", "HISTORY"))

string_value_st = st.text(
    alphabet=[c for c in string.printable[:-6] if c != "'"],
    min_size=0,
    max_size=40,
).map(lambda s: s.rstrip())

value_st = st.one_of(
    st.booleans(),
    st.integers(min_value=-(10**15), max_value=10**15),
    st.floats(allow_nan=False, allow_infinity=False, width=32),
    string_value_st,
    st.none(),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(keyword_st, value_st), min_size=1, max_size=70))
def test_serialize_parse_round_trip(pairs):
    # distinct keywords keep lookups unambiguous
    seen = set()
    cards = []
    for keyword, value in pairs:
        if keyword in seen:
            continue
        seen.add(keyword)
        cards.append(FitsCard(keyword, value))
    header = parse_fits_header(serialize_header(cards))
    meaningful = [c for c in header.cards if not c.is_end]
    assert [c.keyword for c in meaningful] == [c.keyword for c in cards]
    for original, parsed in zip(cards, meaningful):
        assert parsed.value == original.value


def test_extract_meta_megacam():
    data = pad_to_block(
        raw_value_card("RUNID", "'09AQ05  '")
        + raw_value_card("FILTER", "'g.MP9401'")
        + raw_card("END")
    )
    meta = extract_image_meta(parse_fits_header(data), get_profile("MEGACAM"))
    assert meta.run_id == "09AQ05"
    assert meta.filter == "g.MP9401"
    assert "object" in meta.missing and "exptime" in meta.missing


def test_extract_meta_missing_keyword_is_not_an_error():
    data = pad_to_block(raw_value_card("RUNID", "'09AQ05  '") + raw_card("END"))
    meta = extract_image_meta(parse_fits_header(data), get_profile("MEGACAM"))
    assert meta.filter is None
    assert "filter" in meta.missing


def test_extract_meta_vircam_round_trip():
    profile = get_profile("VIRCAM")
    written = {
        "run_id": "179.A-2010",
        "filter": "Ks",
        "object": "VVV-field",
        "date_obs": "2010-03-21T04:05:06",
        "exptime": 40.0,
    }
    cards = b""
    for semantic, value in written.items():
        keyword = profile.keyword_map[semantic]
        if isinstance(value, str):
            cards += raw_value_card(keyword, f"'{value:<8}'")
        else:
            cards += raw_value_card(keyword, repr(value).rjust(20))
    meta = extract_image_meta(parse_fits_header(pad_to_block(cards + raw_card("END"))), profile)
    assert meta.run_id == written["run_id"]
    assert meta.filter == written["filter"]
    assert meta.object == written["object"]
    assert meta.date_obs.isoformat().startswith("2010-03-21T04:05:06")
    assert meta.exptime == 40.0
    assert meta.missing == []


def test_extract_meta_type_mismatch():
    data = pad_to_block(raw_value_card("EXPTIME", "'not-a-number'") + raw_card("END"))
    with pytest.raises(errors.TypeMismatch):
        extract_image_meta(parse_fits_header(data), get_profile("MEGACAM"))
