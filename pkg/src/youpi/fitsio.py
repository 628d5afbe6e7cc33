"""Primary-header FITS reader and writer.

Covers the classic subset only: 2880-byte blocks of 36 fixed 80-byte cards,
``= `` value indicator at bytes 8-9, END terminator. Pixel data and
extensions are never touched; the reader stops at the block containing END.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Union

from youpi import errors

CARD_SIZE = 80
BLOCK_SIZE = 2880
CARDS_PER_BLOCK = BLOCK_SIZE // CARD_SIZE

KEYWORD_RE = re.compile(r"^[A-Z0-9_-]{0,8}$")
COMMENTARY_KEYWORDS = {"COMMENT", "HISTORY", ""}

CardValue = Union[bool, int, float, str, None]


@dataclass
class FitsCard:
    keyword: str
    value: CardValue = None
    comment: Optional[str] = None

    @property
    def is_commentary(self) -> bool:
        return self.keyword in COMMENTARY_KEYWORDS

    @property
    def is_end(self) -> bool:
        return self.keyword == "END"


@dataclass
class FitsHeader:
    """Parsed primary header: all cards up to and including END."""

    cards: list[FitsCard] = field(default_factory=list)
    raw_block_count: int = 1

    def get(self, keyword: str) -> Optional[FitsCard]:
        for card in self.cards:
            if card.keyword == keyword and not card.is_commentary:
                return card
        return None

    def value(self, keyword: str) -> CardValue:
        card = self.get(keyword)
        return card.value if card else None

    @property
    def byte_size(self) -> int:
        return self.raw_block_count * BLOCK_SIZE


def _parse_value_field(text: str) -> tuple[CardValue, Optional[str]]:
    """Split the part after ``= `` into (value, comment)."""
    stripped = text.lstrip()
    if stripped.startswith("'"):
        # quoted string; '' is an escaped quote
        chars = []
        i = 1
        while i < len(stripped):
            ch = stripped[i]
            if ch == "'":
                if i + 1 < len(stripped) and stripped[i + 1] == "'":
                    chars.append("'")
                    i += 2
                    continue
                break
            chars.append(ch)
            i += 1
        else:
            raise ValueError("unterminated string")
        rest = stripped[i + 1 :].strip()
        comment = rest[1:].strip() if rest.startswith("/") else None
        # trailing blanks inside the quotes are not significant
        return "".join(chars).rstrip(), comment or None

    body, _, comment = stripped.partition("/")
    body = body.strip()
    comment = comment.strip() or None
    if body == "":
        return None, comment
    if body == "T":
        return True, comment
    if body == "F":
        return False, comment
    try:
        return int(body), comment
    except ValueError:
        pass
    try:
        return float(body), comment
    except ValueError:
        pass
    # tolerate unquoted text values written by sloppy producers
    return body, comment


def _parse_card(raw: bytes, index: int) -> FitsCard:
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise errors.MalformedCard(f"card {index}: non-ASCII bytes", {"card": index})
    keyword = text[:8].rstrip(" ")
    if not KEYWORD_RE.match(keyword):
        raise errors.MalformedCard(
            f"card {index}: bad keyword {keyword!r}", {"card": index, "keyword": keyword}
        )
    if keyword == "END":
        return FitsCard(keyword="END")
    if text[8:10] == "= " and keyword not in COMMENTARY_KEYWORDS:
        try:
            value, comment = _parse_value_field(text[10:])
        except ValueError as exc:
            raise errors.MalformedCard(f"card {index}: {exc}", {"card": index})
        return FitsCard(keyword=keyword, value=value, comment=comment)
    return FitsCard(keyword=keyword, value=None, comment=text[8:].strip() or None)


def parse_fits_header(data: bytes) -> FitsHeader:
    """Parse a primary header from ``data`` starting at offset 0.

    Consumes whole 2880-byte blocks up to the one holding the END card and
    never inspects bytes beyond it.
    """
    cards: list[FitsCard] = []
    block_index = 0
    while True:
        start = block_index * BLOCK_SIZE
        block = data[start : start + BLOCK_SIZE]
        if len(block) < BLOCK_SIZE:
            if len(block) == 0:
                raise errors.MissingEnd("no END card before end of input")
            raise errors.TruncatedBlock(
                f"partial block of {len(block)} bytes before END",
                {"offset": start, "length": len(block)},
            )
        for i in range(CARDS_PER_BLOCK):
            raw = block[i * CARD_SIZE : (i + 1) * CARD_SIZE]
            card = _parse_card(raw, block_index * CARDS_PER_BLOCK + i)
            if card.is_end:
                cards.append(card)
                return FitsHeader(cards=cards, raw_block_count=block_index + 1)
            # blank padding cards are not meaningful
            if card.keyword == "" and card.value is None and card.comment is None:
                continue
            cards.append(card)
        block_index += 1


def read_fits_header(stream: BinaryIO) -> FitsHeader:
    """Incrementally read a header from a binary stream, block by block."""
    data = b""
    while True:
        block = stream.read(BLOCK_SIZE)
        data += block
        try:
            return parse_fits_header(data)
        except errors.MissingEnd:
            if len(block) < BLOCK_SIZE:
                raise
        # TruncatedBlock propagates immediately: the stream ended mid-block


def _format_value(value: CardValue) -> str:
    if isinstance(value, str):
        body = value.replace("'", "''")
        return "'" + body.ljust(8) + "'"
    if value is None:
        return ""
    if value is True:
        return "T".rjust(20)
    if value is False:
        return "F".rjust(20)
    if isinstance(value, int):
        return str(value).rjust(20)
    return repr(value).rjust(20)


def format_card(card: FitsCard) -> bytes:
    """Render one card as its 80-byte image."""
    keyword = card.keyword
    if not KEYWORD_RE.match(keyword) and keyword != "END":
        raise errors.MalformedCard(f"bad keyword {keyword!r}")
    if card.is_end:
        text = "END"
    elif card.is_commentary:
        text = keyword.ljust(8) + (card.comment or "")
    else:
        text = keyword.ljust(8) + "= " + _format_value(card.value)
        if card.comment:
            text += " / " + card.comment
    if len(text) > CARD_SIZE:
        raise errors.MalformedCard(f"card for {keyword!r} exceeds 80 bytes")
    return text.ljust(CARD_SIZE).encode("ascii")


def serialize_header(cards: list[FitsCard]) -> bytes:
    """Write cards (END appended if missing) padded to whole blocks."""
    out = bytearray()
    has_end = False
    for card in cards:
        if card.is_end:
            out += format_card(card)
            has_end = True
            break
        out += format_card(card)
    if not has_end:
        out += format_card(FitsCard(keyword="END"))
    while len(out) % BLOCK_SIZE:
        out += b" " * CARD_SIZE
    return bytes(out)
