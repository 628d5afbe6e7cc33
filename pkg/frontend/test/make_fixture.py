#!/usr/bin/env python3
"""Writes N synthetic FITS headers for the frontend end-to-end test."""

import sys
from pathlib import Path

from youpi.fitsio import FitsCard, serialize_header


def main() -> int:
    out_dir = Path(sys.argv[1])
    count = int(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        cards = [
            FitsCard("SIMPLE", True),
            FitsCard("RUNID", "08BW3"),
            FitsCard("FILTER", "i.MP9702"),
            FitsCard("OBJECT", "CFHTLS-W3"),
            FitsCard("DATE-OBS", "2008-11-05T07:00:00"),
            FitsCard("EXPTIME", 615.0),
            FitsCard("SERIAL", i),
        ]
        (out_dir / f"w3-{i:05d}.fits").write_bytes(serialize_header(cards))
    print(count)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
