"""Image catalog: records, combinable queries, saved selections and tags.

Query predicates combine as a pure conjunction; an empty query matches the
whole catalog. Selections keep insertion order and never hold duplicates.
Tags are a flat namespace and auto-create on first mark.
"""

from __future__ import annotations

import fnmatch
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional

from youpi import errors
from youpi.authz import (
    DEFAULT_MODE,
    Accounts,
    Action,
    PermissionMode,
    UserAccount,
    check_access,
    require_access,
)
from youpi.store import Database, isoformat, parse_ts, utcnow

GRADES = ("A", "B", "C", "D")
CHECKSUM_LEN = 32


@dataclass
class ImageRecord:
    image_id: str
    filename: str
    abs_path: str
    checksum: str
    instrument: str
    ingestion_id: str
    owner: str
    group: str
    mode: PermissionMode
    run_id: Optional[str] = None
    filter: Optional[str] = None
    object: Optional[str] = None
    date_obs: Optional[datetime] = None
    exptime: Optional[float] = None
    grade: Optional[str] = None
    tags: set[str] = field(default_factory=set)


@dataclass
class Tag:
    tag_id: str
    name: str
    style: Optional[str]
    owner: str
    group: str
    mode: PermissionMode


@dataclass
class Selection:
    selection_id: str
    name: str
    image_ids: list[str]
    owner: str
    group: str
    mode: PermissionMode


@dataclass
class SavedPath:
    path_id: str
    path: str
    owner: str
    created_at: datetime


@dataclass
class Query:
    """Conjunction of optional predicates; all present ones must hold."""

    run_id: Optional[str] = None
    filter: Optional[str] = None
    instrument: Optional[str] = None
    grade: Optional[str] = None
    has_tag: Optional[str] = None
    filename_glob: Optional[str] = None
    ingestion_id: Optional[str] = None
    date_from: Optional[datetime] = None
    date_to: Optional[datetime] = None
    in_selection: Optional[str] = None


@dataclass
class ImportLine:
    lineno: int
    filename: str
    checksum: Optional[str] = None


@dataclass
class ImportReport:
    resolved: list[tuple[int, str]] = field(default_factory=list)  # (lineno, image_id)
    unresolved: list[tuple[int, str, str]] = field(default_factory=list)  # (lineno, filename, reason)
    mismatched: list[tuple[int, str]] = field(default_factory=list)  # (lineno, filename)


def _row_to_image(row, tags: set[str]) -> ImageRecord:
    return ImageRecord(
        image_id=row["image_id"],
        filename=row["filename"],
        abs_path=row["abs_path"],
        checksum=row["checksum"],
        instrument=row["instrument"],
        run_id=row["run_id"],
        filter=row["filter"],
        object=row["object"],
        date_obs=parse_ts(row["date_obs"]),
        exptime=row["exptime"],
        grade=row["grade"],
        ingestion_id=row["ingestion_id"],
        owner=row["owner"],
        group=row["grp"],
        mode=PermissionMode.from_string(row["mode"]),
        tags=tags,
    )


def matches_query(
    image: ImageRecord, q: Query, selection_ids: Optional[set[str]] = None
) -> bool:
    """Predicate oracle shared by the implementation and the tests.

    ``selection_ids`` is the pre-resolved membership set for ``q.in_selection``.
    """
    if q.run_id is not None and image.run_id != q.run_id:
        return False
    if q.filter is not None and image.filter != q.filter:
        return False
    if q.instrument is not None and image.instrument != q.instrument:
        return False
    if q.grade is not None and image.grade != q.grade:
        return False
    if q.has_tag is not None and q.has_tag not in image.tags:
        return False
    if q.filename_glob is not None and not fnmatch.fnmatchcase(image.filename, q.filename_glob):
        return False
    if q.ingestion_id is not None and image.ingestion_id != q.ingestion_id:
        return False
    if q.date_from is not None and (image.date_obs is None or image.date_obs < q.date_from):
        return False
    if q.date_to is not None and (image.date_obs is None or image.date_obs > q.date_to):
        return False
    if q.in_selection is not None and (
        selection_ids is None or image.image_id not in selection_ids
    ):
        return False
    return True


class Catalog:
    def __init__(self, db: Database, accounts: Accounts):
        self.db = db
        self.accounts = accounts

    # -- images ----------------------------------------------------------------

    def insert_image(
        self,
        filename: str,
        abs_path: str,
        checksum: str,
        instrument: str,
        ingestion_id: str,
        owner: UserAccount,
        run_id: Optional[str] = None,
        filter: Optional[str] = None,
        object: Optional[str] = None,
        date_obs: Optional[datetime] = None,
        exptime: Optional[float] = None,
    ) -> Optional[ImageRecord]:
        """Insert unless an image with the same checksum exists; None = duplicate."""
        image_id = uuid.uuid4().hex
        group = self.accounts.personal_group(owner)
        with self.db.transaction() as conn:
            dup = conn.execute("SELECT 1 FROM images WHERE checksum = ?", (checksum,)).fetchone()
            if dup:
                return None
            conn.execute(
                """INSERT INTO images (image_id, filename, abs_path, checksum, instrument,
                       run_id, filter, object, date_obs, exptime, grade, ingestion_id,
                       owner, grp, mode)
                   VALUES (?,?,?,?,?,?,?,?,?,?,NULL,?,?,?,?)""",
                (
                    image_id,
                    filename,
                    abs_path,
                    checksum,
                    instrument,
                    run_id,
                    filter,
                    object,
                    isoformat(date_obs),
                    exptime,
                    ingestion_id,
                    owner.user_id,
                    group,
                    DEFAULT_MODE.to_string(),
                ),
            )
        return self.get_image(image_id)

    def _tags_by_image(self) -> dict[str, set[str]]:
        rows = self.db.query(
            "SELECT it.image_id, t.name FROM image_tags it JOIN tags t ON t.tag_id = it.tag_id"
        )
        out: dict[str, set[str]] = {}
        for row in rows:
            out.setdefault(row["image_id"], set()).add(row["name"])
        return out

    def get_image(self, image_id: str) -> ImageRecord:
        row = self.db.query_one("SELECT * FROM images WHERE image_id = ?", (image_id,))
        if row is None:
            raise errors.UnknownImage(f"no image {image_id!r}")
        tags = {
            r["name"]
            for r in self.db.query(
                "SELECT t.name FROM image_tags it JOIN tags t ON t.tag_id = it.tag_id "
                "WHERE it.image_id = ?",
                (image_id,),
            )
        }
        return _row_to_image(row, tags)

    def all_images(self) -> list[ImageRecord]:
        tag_map = self._tags_by_image()
        return [
            _row_to_image(row, tag_map.get(row["image_id"], set()))
            for row in self.db.query("SELECT * FROM images")
        ]

    def set_grade(self, image_ids: list[str], grade: Optional[str], user: UserAccount) -> int:
        """Grades are opaque quality labels from a fixed vocabulary."""
        if grade is not None and grade not in GRADES:
            raise errors.MalformedBody(f"grade must be one of {GRADES} or null")
        records = [self.get_image(i) for i in image_ids]
        for rec in records:
            require_access(user, rec, Action.WRITE, f"image {rec.image_id}")
        with self.db.transaction() as conn:
            for rec in records:
                conn.execute(
                    "UPDATE images SET grade = ? WHERE image_id = ?", (grade, rec.image_id)
                )
        return len(records)

    def query_images(self, q: Query, as_user: UserAccount) -> list[ImageRecord]:
        """All images satisfying every present predicate and readable by the user."""
        selection_ids: Optional[set[str]] = None
        if q.in_selection is not None:
            selection = self.find_selection_by_name(q.in_selection, as_user)
            selection_ids = set(selection.image_ids)
        if q.has_tag is not None and self._find_tag(q.has_tag) is None:
            raise errors.UnknownTag(f"no tag {q.has_tag!r}")
        result = [
            img
            for img in self.all_images()
            if matches_query(img, q, selection_ids) and check_access(as_user, img, Action.READ)
        ]
        result.sort(key=lambda img: (img.filename, img.image_id))
        return result

    # -- selections --------------------------------------------------------------

    def _row_to_selection(self, row) -> Selection:
        ids = [
            r["image_id"]
            for r in self.db.query(
                "SELECT image_id FROM selection_images WHERE selection_id = ? ORDER BY position",
                (row["selection_id"],),
            )
        ]
        return Selection(
            selection_id=row["selection_id"],
            name=row["name"],
            image_ids=ids,
            owner=row["owner"],
            group=row["grp"],
            mode=PermissionMode.from_string(row["mode"]),
        )

    def get_selection(self, selection_id: str) -> Selection:
        row = self.db.query_one(
            "SELECT * FROM selections WHERE selection_id = ?", (selection_id,)
        )
        if row is None:
            raise errors.UnknownSelection(f"no selection {selection_id!r}")
        return self._row_to_selection(row)

    def find_selection_by_name(self, name: str, as_user: UserAccount) -> Selection:
        """Resolve a selection name: the user's own wins, then any readable one."""
        rows = self.db.query(
            "SELECT * FROM selections WHERE name = ? ORDER BY selection_id", (name,)
        )
        candidates = [self._row_to_selection(r) for r in rows]
        own = [s for s in candidates if s.owner == as_user.user_id]
        if own:
            return own[0]
        readable = [s for s in candidates if check_access(as_user, s, Action.READ)]
        if readable:
            return readable[0]
        raise errors.UnknownSelection(f"no selection named {name!r}")

    def list_selections(self, user: UserAccount) -> list[Selection]:
        rows = self.db.query("SELECT * FROM selections ORDER BY name, selection_id")
        return [
            s for s in (self._row_to_selection(r) for r in rows)
            if check_access(user, s, Action.READ)
        ]

    def save_selection(self, name: str, image_ids: list[str], user: UserAccount) -> Selection:
        if not name:
            raise errors.MalformedBody("selection name must be non-empty")
        deduped: list[str] = []
        seen: set[str] = set()
        for image_id in image_ids:
            if image_id not in seen:
                seen.add(image_id)
                deduped.append(image_id)
        selection_id = uuid.uuid4().hex
        group = self.accounts.personal_group(user)
        with self.db.transaction() as conn:
            clash = conn.execute(
                "SELECT 1 FROM selections WHERE name = ? AND owner = ?", (name, user.user_id)
            ).fetchone()
            if clash:
                raise errors.DuplicateName(f"selection {name!r} already exists for this owner")
            for image_id in deduped:
                if not conn.execute(
                    "SELECT 1 FROM images WHERE image_id = ?", (image_id,)
                ).fetchone():
                    raise errors.UnknownImage(f"no image {image_id!r}")
            conn.execute(
                "INSERT INTO selections (selection_id, name, owner, grp, mode) VALUES (?,?,?,?,?)",
                (selection_id, name, user.user_id, group, DEFAULT_MODE.to_string()),
            )
            for pos, image_id in enumerate(deduped):
                conn.execute(
                    "INSERT INTO selection_images (selection_id, position, image_id) VALUES (?,?,?)",
                    (selection_id, pos, image_id),
                )
        return self.get_selection(selection_id)

    def merge_selections(
        self, target_name: str, source_ids: list[str], user: UserAccount
    ) -> Selection:
        """Union of the sources in source order, first occurrence wins."""
        merged: list[str] = []
        seen: set[str] = set()
        for sid in source_ids:
            source = self.get_selection(sid)
            require_access(user, source, Action.READ, f"selection {sid}")
            for image_id in source.image_ids:
                if image_id not in seen:
                    seen.add(image_id)
                    merged.append(image_id)
        return self.save_selection(target_name, merged, user)

    def delete_selection(self, selection_id: str, user: UserAccount) -> None:
        selection = self.get_selection(selection_id)
        require_access(user, selection, Action.WRITE, f"selection {selection_id}")
        with self.db.transaction() as conn:
            conn.execute("DELETE FROM selection_images WHERE selection_id = ?", (selection_id,))
            conn.execute("DELETE FROM selections WHERE selection_id = ?", (selection_id,))

    # -- text import / export -----------------------------------------------------

    @staticmethod
    def parse_selection_text(text: str) -> list[ImportLine]:
        """LF lines: ``<filename>`` or ``<filename> <32-hex checksum>``; # comments."""
        out: list[ImportLine] = []
        for lineno, raw in enumerate(text.split("\n"), start=1):
            line = raw.rstrip()
            if not line or line.lstrip().startswith("#"):
                continue
            parts = line.split(" ")
            if len(parts) == 1:
                out.append(ImportLine(lineno, parts[0]))
            else:
                filename, checksum = parts[0], parts[-1]
                out.append(ImportLine(lineno, filename, checksum))
        return out

    def import_selection_text(
        self, name: str, text: str, user: UserAccount
    ) -> tuple[Selection, ImportReport]:
        report = ImportReport()
        resolved_ids: list[str] = []
        for line in self.parse_selection_text(text):
            rows = self.db.query(
                "SELECT image_id, checksum FROM images WHERE filename = ?", (line.filename,)
            )
            if not rows:
                report.unresolved.append((line.lineno, line.filename, "unknown-filename"))
                continue
            if line.checksum is not None:
                match = [r for r in rows if r["checksum"] == line.checksum]
                if not match:
                    report.mismatched.append((line.lineno, line.filename))
                    continue
                image_id = match[0]["image_id"]
            elif len(rows) == 1:
                image_id = rows[0]["image_id"]
            else:
                # several images share the filename: refuse to guess
                report.unresolved.append((line.lineno, line.filename, "ambiguous-filename"))
                continue
            report.resolved.append((line.lineno, image_id))
            resolved_ids.append(image_id)
        if not resolved_ids:
            raise errors.EmptyResolution(f"no line of {name!r} resolved to an image")
        selection = self.save_selection(name, resolved_ids, user)
        return selection, report

    def export_selection_text(self, selection_id: str, user: UserAccount) -> str:
        """``filename checksum`` lines; re-importing yields an identical id list."""
        selection = self.get_selection(selection_id)
        require_access(user, selection, Action.READ, f"selection {selection_id}")
        lines = []
        for image_id in selection.image_ids:
            img = self.get_image(image_id)
            lines.append(f"{img.filename} {img.checksum}")
        return "\n".join(lines) + "\n" if lines else ""

    def batch_import_selections(
        self, directory: str, user: UserAccount
    ) -> list[dict]:
        """One import per ``*.txt`` file (lexicographic), named after the stem."""
        root = Path(directory)
        if not root.exists():
            raise errors.PathNotFound(f"no such directory {directory!r}")
        if not root.is_dir():
            raise errors.NotADirectory(f"{directory!r} is not a directory")
        results = []
        for path in sorted(root.glob("*.txt")):
            entry: dict = {"file": path.name, "name": path.stem}
            try:
                text = path.read_text(encoding="utf-8")
                selection, report = self.import_selection_text(path.stem, text, user)
                entry["selection_id"] = selection.selection_id
                entry["report"] = report
            except errors.YoupiError as exc:
                entry["error"] = exc.code
                entry["message"] = exc.message
            results.append(entry)
        return results

    # -- tags -----------------------------------------------------------------------

    def _find_tag(self, name: str) -> Optional[Tag]:
        row = self.db.query_one("SELECT * FROM tags WHERE name = ?", (name,))
        if row is None:
            return None
        return Tag(
            tag_id=row["tag_id"],
            name=row["name"],
            style=row["style"],
            owner=row["owner"],
            group=row["grp"],
            mode=PermissionMode.from_string(row["mode"]),
        )

    def list_tags(self) -> list[Tag]:
        return [t for t in (self._find_tag(r["name"]) for r in self.db.query("SELECT name FROM tags ORDER BY name")) if t]

    def create_tag(self, name: str, user: UserAccount, style: Optional[str] = None) -> Tag:
        if not name:
            raise errors.MalformedBody("tag name must be non-empty")
        group = self.accounts.personal_group(user)
        with self.db.transaction() as conn:
            if conn.execute("SELECT 1 FROM tags WHERE name = ?", (name,)).fetchone():
                raise errors.DuplicateName(f"tag {name!r} already exists")
            conn.execute(
                "INSERT INTO tags (tag_id, name, style, owner, grp, mode) VALUES (?,?,?,?,?,?)",
                (uuid.uuid4().hex, name, style, user.user_id, group, DEFAULT_MODE.to_string()),
            )
        tag = self._find_tag(name)
        assert tag is not None
        return tag

    def apply_tag(
        self, tag_name: str, image_ids: list[str], mark: bool, user: UserAccount
    ) -> int:
        """Mark or unmark a tag on the listed images; returns how many changed."""
        tag = self._find_tag(tag_name)
        if tag is None:
            if not mark:
                raise errors.UnknownTag(f"no tag {tag_name!r}")
            tag = self.create_tag(tag_name, user)
        records = [self.get_image(i) for i in image_ids]
        denied = [r.image_id for r in records if not check_access(user, r, Action.WRITE)]
        if denied:
            raise errors.PermissionDenied(
                f"WRITE denied on {len(denied)} image(s)", {"denied": len(denied)}
            )
        affected = 0
        with self.db.transaction() as conn:
            for rec in records:
                if mark:
                    cur = conn.execute(
                        "INSERT OR IGNORE INTO image_tags (image_id, tag_id) VALUES (?,?)",
                        (rec.image_id, tag.tag_id),
                    )
                else:
                    cur = conn.execute(
                        "DELETE FROM image_tags WHERE image_id = ? AND tag_id = ?",
                        (rec.image_id, tag.tag_id),
                    )
                affected += cur.rowcount
        return affected

    # -- saved paths -------------------------------------------------------------------

    def save_path(self, path: str, user: UserAccount) -> SavedPath:
        if not path:
            raise errors.MalformedBody("path must be non-empty")
        path_id = uuid.uuid4().hex
        now = utcnow()
        self.db.execute(
            "INSERT INTO saved_paths (path_id, path, owner, created_at) VALUES (?,?,?,?)",
            (path_id, path, user.user_id, isoformat(now)),
        )
        return SavedPath(path_id=path_id, path=path, owner=user.user_id, created_at=now)

    def get_saved_path(self, path_id: str) -> SavedPath:
        row = self.db.query_one("SELECT * FROM saved_paths WHERE path_id = ?", (path_id,))
        if row is None:
            raise errors.UnknownReference(f"no saved path {path_id!r}")
        return SavedPath(
            path_id=row["path_id"],
            path=row["path"],
            owner=row["owner"],
            created_at=parse_ts(row["created_at"]),
        )

    def list_saved_paths(self, user: UserAccount) -> list[SavedPath]:
        rows = self.db.query(
            "SELECT * FROM saved_paths WHERE owner = ? ORDER BY created_at", (user.user_id,)
        )
        return [
            SavedPath(r["path_id"], r["path"], r["owner"], parse_ts(r["created_at"]))
            for r in rows
        ]
