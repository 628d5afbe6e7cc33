"""Domain error hierarchy.

Every error carries a stable machine code so the HTTP layer and the CLI can
surface it without string matching. The code set is closed; new errors mean
new subclasses here.
"""

from __future__ import annotations

from typing import Any, Optional


class YoupiError(Exception):
    """Base class for all domain errors."""

    code = "INTERNAL"
    http_status = 500

    def __init__(self, message: str = "", detail: Optional[dict[str, Any]] = None):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.detail = detail or {}

    def to_payload(self) -> dict[str, Any]:
        payload: dict[str, Any] = {"code": self.code, "message": self.message}
        if self.detail:
            payload["detail"] = self.detail
        return payload


# -- authentication / authorization -----------------------------------------

class InvalidCredentials(YoupiError):
    code = "INVALID_CREDENTIALS"
    http_status = 401


class AuthRequired(YoupiError):
    code = "AUTH_REQUIRED"
    http_status = 401


class PermissionDenied(YoupiError):
    code = "PERMISSION_DENIED"
    http_status = 403


# -- generic lookup / validation ---------------------------------------------

class UnknownRoute(YoupiError):
    code = "UNKNOWN_ROUTE"
    http_status = 404


class MalformedBody(YoupiError):
    code = "MALFORMED_BODY"
    http_status = 400


class UnknownImage(YoupiError):
    code = "UNKNOWN_IMAGE"
    http_status = 404


class UnknownTag(YoupiError):
    code = "UNKNOWN_TAG"
    http_status = 404


class UnknownSelection(YoupiError):
    code = "UNKNOWN_SELECTION"
    http_status = 404


class UnknownUser(YoupiError):
    code = "UNKNOWN_USER"
    http_status = 404


class UnknownGroup(YoupiError):
    code = "UNKNOWN_GROUP"
    http_status = 404


class UnknownPlugin(YoupiError):
    code = "UNKNOWN_PLUGIN"
    http_status = 404


class UnknownConfig(YoupiError):
    code = "UNKNOWN_CONFIG"
    http_status = 404


class UnknownItem(YoupiError):
    code = "UNKNOWN_ITEM"
    http_status = 404


class UnknownPolicy(YoupiError):
    code = "UNKNOWN_POLICY"
    http_status = 404


class UnknownJob(YoupiError):
    code = "UNKNOWN_JOB"
    http_status = 404


class UnknownIngestion(YoupiError):
    code = "UNKNOWN_INGESTION"
    http_status = 404


class UnknownReference(YoupiError):
    code = "UNKNOWN_REFERENCE"
    http_status = 404


class DuplicateName(YoupiError):
    code = "DUPLICATE_NAME"
    http_status = 409


# -- FITS parsing -------------------------------------------------------------

class TruncatedBlock(YoupiError):
    code = "TRUNCATED_BLOCK"
    http_status = 400


class MissingEnd(YoupiError):
    code = "MISSING_END"
    http_status = 400


class MalformedCard(YoupiError):
    code = "MALFORMED_CARD"
    http_status = 400


class TypeMismatch(YoupiError):
    code = "TYPE_MISMATCH"
    http_status = 400


# -- ingestion ----------------------------------------------------------------

class PathNotFound(YoupiError):
    code = "PATH_NOT_FOUND"
    http_status = 404


class NotADirectory(YoupiError):
    code = "NOT_A_DIRECTORY"
    http_status = 400


class IoError(YoupiError):
    code = "IO_ERROR"
    http_status = 500


class EmptyScan(YoupiError):
    code = "EMPTY_SCAN"
    http_status = 409


# -- catalog ------------------------------------------------------------------

class EmptyResolution(YoupiError):
    code = "EMPTY_RESOLUTION"
    http_status = 409


# -- plugins / cart -----------------------------------------------------------

class PluginDisabled(YoupiError):
    code = "PLUGIN_DISABLED"
    http_status = 409


class ParseError(YoupiError):
    code = "PARSE_ERROR"
    http_status = 400


class EmptyImageSource(YoupiError):
    code = "EMPTY_IMAGE_SOURCE"
    http_status = 409


# -- cluster ------------------------------------------------------------------

class InvalidPattern(YoupiError):
    code = "INVALID_PATTERN"
    http_status = 400


class EmptyNodeSet(YoupiError):
    code = "EMPTY_NODE_SET"
    http_status = 409


class AlreadyTerminal(YoupiError):
    code = "ALREADY_TERMINAL"
    http_status = 409
