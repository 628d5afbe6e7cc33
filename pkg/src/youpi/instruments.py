"""Instrument metadata profiles.

A profile maps the five semantic fields (run_id, filter, object, date_obs,
exptime) onto instrument-specific FITS keywords. The shipped defaults live in
``instruments.conf`` next to this module and can be overridden by pointing
:func:`load_profiles` at another file of the same format.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from datetime import datetime, timezone
from importlib import resources
from typing import Optional

from youpi import errors
from youpi.fitsio import FitsHeader

SEMANTIC_FIELDS = ("run_id", "filter", "object", "date_obs", "exptime")


@dataclass(frozen=True)
class InstrumentProfile:
    instrument_id: str
    keyword_map: dict[str, str]

    def __post_init__(self):
        missing = [f for f in SEMANTIC_FIELDS if f not in self.keyword_map]
        extra = [f for f in self.keyword_map if f not in SEMANTIC_FIELDS]
        if missing or extra:
            raise ValueError(f"profile {self.instrument_id}: missing={missing} extra={extra}")


@dataclass
class ImageMeta:
    """Semantic fields pulled from one header; absent keywords stay None."""

    run_id: Optional[str] = None
    filter: Optional[str] = None
    object: Optional[str] = None
    date_obs: Optional[datetime] = None
    exptime: Optional[float] = None
    missing: list[str] = dc_field(default_factory=list)


def parse_profiles(text: str) -> dict[str, InstrumentProfile]:
    profiles: dict[str, InstrumentProfile] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        instrument = parts[0]
        keyword_map = {}
        for token in parts[1:]:
            if "=" not in token:
                raise errors.ParseError(f"line {lineno}: bad token {token!r}", {"line": lineno})
            semantic, keyword = token.split("=", 1)
            keyword_map[semantic] = keyword
        try:
            profiles[instrument] = InstrumentProfile(instrument, keyword_map)
        except ValueError as exc:
            raise errors.ParseError(f"line {lineno}: {exc}", {"line": lineno})
    return profiles


def load_profiles(path: Optional[str] = None) -> dict[str, InstrumentProfile]:
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_profiles(fh.read())
    text = resources.files("youpi").joinpath("instruments.conf").read_text("utf-8")
    return parse_profiles(text)


BUILTIN_PROFILES = load_profiles()


def get_profile(instrument_id: str) -> InstrumentProfile:
    try:
        return BUILTIN_PROFILES[instrument_id.upper()]
    except KeyError:
        raise errors.MalformedBody(
            f"unknown instrument {instrument_id!r}",
            {"known": sorted(BUILTIN_PROFILES)},
        )


def _parse_date_obs(value) -> datetime:
    if not isinstance(value, str):
        raise errors.TypeMismatch(f"date_obs keyword holds {type(value).__name__}, not a string")
    try:
        ts = datetime.fromisoformat(value)
    except ValueError:
        raise errors.TypeMismatch(f"unparseable date_obs value {value!r}")
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def extract_image_meta(header: FitsHeader, profile: InstrumentProfile) -> ImageMeta:
    """Pull the profile's mapped keywords out of a parsed header.

    Missing keywords are reported in ``meta.missing`` rather than raised; a
    present keyword of the wrong type raises TypeMismatch.
    """
    meta = ImageMeta()
    for semantic in SEMANTIC_FIELDS:
        keyword = profile.keyword_map[semantic]
        card = header.get(keyword)
        if card is None or card.value is None:
            meta.missing.append(semantic)
            continue
        value = card.value
        if semantic == "date_obs":
            meta.date_obs = _parse_date_obs(value)
        elif semantic == "exptime":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise errors.TypeMismatch(
                    f"exptime keyword {keyword} holds {type(value).__name__}, expected a number"
                )
            if value < 0:
                raise errors.TypeMismatch(f"negative exptime {value}")
            meta.exptime = float(value)
        else:
            if not isinstance(value, str):
                raise errors.TypeMismatch(
                    f"{semantic} keyword {keyword} holds {type(value).__name__}, expected a string"
                )
            setattr(meta, semantic, value)
    return meta
