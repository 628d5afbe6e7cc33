"""FITS ingestion: scan data paths, parse headers, checksum, register records.

Per-file failures never abort a batch; they are recorded in the report. An
image is a duplicate iff an identical checksum is already catalogued, so
re-running an unchanged ingestion is a no-op.
"""

from __future__ import annotations

import hashlib
import logging
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional

from youpi import errors
from youpi.authz import UserAccount
from youpi.catalog import Catalog
from youpi.fitsio import read_fits_header
from youpi.instruments import InstrumentProfile, extract_image_meta
from youpi.notify import NotificationSink
from youpi.store import Database, isoformat, parse_ts, utcnow

logger = logging.getLogger(__name__)

FITS_SUFFIXES = (".fits", ".fits.fz")
_CHUNK = 1 << 20


@dataclass
class IngestionReport:
    ingestion_id: str
    user_id: str
    requested_paths: list[str]
    ingested: int = 0
    skipped_duplicates: int = 0
    failed: list[tuple[str, str]] = field(default_factory=list)  # (path, error code)
    started_at: Optional[datetime] = None
    finished_at: Optional[datetime] = None


def compute_checksum(path: str | Path) -> str:
    """Lowercase 32-hex MD5 of the full file content (the duplicate key)."""
    md5 = hashlib.md5()
    try:
        with open(path, "rb") as fh:
            while chunk := fh.read(_CHUNK):
                md5.update(chunk)
    except OSError as exc:
        raise errors.IoError(f"cannot read {path}: {exc}")
    return md5.hexdigest()


def _is_fits_name(name: str) -> bool:
    lower = name.lower()
    return any(lower.endswith(suffix) for suffix in FITS_SUFFIXES)


def scan_data_paths(paths: list[str], recursive: bool = False) -> list[str]:
    """Candidate FITS files under the given directories, sorted lexicographically.

    Network mounts look exactly like local directories here.
    """
    candidates: set[str] = set()
    for path in paths:
        root = Path(path)
        if not root.exists():
            raise errors.PathNotFound(f"no such path {path!r}")
        if not root.is_dir():
            raise errors.NotADirectory(f"{path!r} is not a directory")
        entries = root.rglob("*") if recursive else root.iterdir()
        for entry in entries:
            if entry.is_file() and _is_fits_name(entry.name):
                candidates.add(str(entry))
    return sorted(candidates)


class Ingestor:
    def __init__(self, db: Database, catalog: Catalog, sink: NotificationSink):
        self.db = db
        self.catalog = catalog
        self.sink = sink

    def create_request(
        self,
        paths: list[str],
        instrument: str,
        user: UserAccount,
        recursive: bool = False,
    ) -> str:
        """Persist an ingestion request row; the work happens in run_ingestion."""
        ingestion_id = uuid.uuid4().hex
        self.db.execute(
            "INSERT INTO ingestions (ingestion_id, user_id, instrument, requested_paths, recursive)"
            " VALUES (?,?,?,?,?)",
            (ingestion_id, user.user_id, instrument, "\n".join(paths), int(recursive)),
        )
        return ingestion_id

    def run_ingestion(
        self,
        paths: list[str],
        profile: InstrumentProfile,
        user: UserAccount,
        recursive: bool = False,
        ingestion_id: Optional[str] = None,
    ) -> IngestionReport:
        """Ingest every candidate file under ``paths`` and notify the user.

        Report counts always satisfy ingested + skipped + |failed| = scanned.
        """
        if ingestion_id is None:
            ingestion_id = self.create_request(paths, profile.instrument_id, user, recursive)
        report = IngestionReport(
            ingestion_id=ingestion_id,
            user_id=user.user_id,
            requested_paths=list(paths),
            started_at=utcnow(),
        )
        candidates = scan_data_paths(paths, recursive=recursive)
        if not candidates:
            raise errors.EmptyScan(f"no FITS files under {paths!r}")
        for candidate in candidates:
            try:
                self._ingest_one(candidate, profile, user, ingestion_id, report)
            except errors.YoupiError as exc:
                report.failed.append((candidate, exc.code))
            except OSError as exc:
                logger.warning("io failure on %s: %s", candidate, exc)
                report.failed.append((candidate, errors.IoError.code))
        report.finished_at = utcnow()
        self._save_report(report)
        self.sink.deliver(report)
        return report

    def _ingest_one(
        self,
        path: str,
        profile: InstrumentProfile,
        user: UserAccount,
        ingestion_id: str,
        report: IngestionReport,
    ) -> None:
        with open(path, "rb") as fh:
            header = read_fits_header(fh)
        meta = extract_image_meta(header, profile)
        checksum = compute_checksum(path)
        record = self.catalog.insert_image(
            filename=Path(path).name,
            abs_path=str(Path(path).resolve()),
            checksum=checksum,
            instrument=profile.instrument_id,
            ingestion_id=ingestion_id,
            owner=user,
            run_id=meta.run_id,
            filter=meta.filter,
            object=meta.object,
            date_obs=meta.date_obs,
            exptime=meta.exptime,
        )
        if record is None:
            report.skipped_duplicates += 1
        else:
            report.ingested += 1

    def _save_report(self, report: IngestionReport) -> None:
        failed_text = "\n".join(f"{path}\t{code}" for path, code in report.failed)
        self.db.execute(
            """UPDATE ingestions SET ingested = ?, skipped_duplicates = ?, failed = ?,
                   started_at = ?, finished_at = ? WHERE ingestion_id = ?""",
            (
                report.ingested,
                report.skipped_duplicates,
                failed_text,
                isoformat(report.started_at),
                isoformat(report.finished_at),
                report.ingestion_id,
            ),
        )

    def get_report(self, ingestion_id: str) -> IngestionReport:
        row = self.db.query_one(
            "SELECT * FROM ingestions WHERE ingestion_id = ?", (ingestion_id,)
        )
        if row is None:
            raise errors.UnknownIngestion(f"no ingestion {ingestion_id!r}")
        failed = []
        if row["failed"]:
            for line in row["failed"].split("\n"):
                path, _, code = line.rpartition("\t")
                failed.append((path, code))
        return IngestionReport(
            ingestion_id=row["ingestion_id"],
            user_id=row["user_id"],
            requested_paths=row["requested_paths"].split("\n") if row["requested_paths"] else [],
            ingested=row["ingested"] or 0,
            skipped_duplicates=row["skipped_duplicates"] or 0,
            failed=failed,
            started_at=parse_ts(row["started_at"]),
            finished_at=parse_ts(row["finished_at"]),
        )

    def get_request(self, ingestion_id: str) -> dict:
        row = self.db.query_one(
            "SELECT * FROM ingestions WHERE ingestion_id = ?", (ingestion_id,)
        )
        if row is None:
            raise errors.UnknownIngestion(f"no ingestion {ingestion_id!r}")
        return {
            "ingestion_id": row["ingestion_id"],
            "user_id": row["user_id"],
            "instrument": row["instrument"],
            "paths": row["requested_paths"].split("\n") if row["requested_paths"] else [],
            "recursive": bool(row["recursive"]),
            "finished": row["finished_at"] is not None,
        }
