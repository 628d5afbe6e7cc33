"""Ingestion completion notifications.

Real mail delivery is deliberately out of scope; the sink abstraction keeps
the "report back to the user" contract testable. One LF-terminated line per
report:

    INGEST <ingestion_id> user=<id> ingested=<n> skipped=<n> failed=<n>
"""

from __future__ import annotations

import logging
import threading

logger = logging.getLogger(__name__)


def format_report_line(report) -> str:
    return (
        f"INGEST {report.ingestion_id} user={report.user_id} "
        f"ingested={report.ingested} skipped={report.skipped_duplicates} "
        f"failed={len(report.failed)}"
    )


class NotificationSink:
    def deliver(self, report) -> None:
        raise NotImplementedError


class FileNotificationSink(NotificationSink):
    """Appends one line per report to a plain file."""

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()

    def deliver(self, report) -> None:
        line = format_report_line(report) + "\n"
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)


class LogNotificationSink(NotificationSink):
    """Writes report lines to the process log (the default sink)."""

    def deliver(self, report) -> None:
        logger.info("%s", format_report_line(report))


def sink_from_env(value: str | None) -> NotificationSink:
    """``YOUPI_NOTIFY_SINK``: a file path, or empty/"stdout" for the log sink."""
    if value and value not in ("stdout", "-"):
        return FileNotificationSink(value)
    return LogNotificationSink()
