"""Accounts and the Unix-like permission model.

Objects carry an owner, a group and a six-bit read/write mode rendered as
``rw|r-|--`` (owner, group, other pairs). Access resolution follows Unix
semantics: the first matching clause decides, so an owner is judged by the
owner bits even when the group or other bits would be more permissive.
"""

from __future__ import annotations

import hashlib
import hmac
import re
import secrets
import uuid
from dataclasses import dataclass, field
from enum import Enum

from youpi import errors
from youpi.store import Database

MODE_RE = re.compile(r"^[r-][w-]\|[r-][w-]\|[r-][w-]$")


class Action(Enum):
    READ = "READ"
    WRITE = "WRITE"


@dataclass(frozen=True)
class PermissionMode:
    owner_r: bool
    owner_w: bool
    group_r: bool
    group_w: bool
    other_r: bool
    other_w: bool

    @classmethod
    def from_string(cls, text: str) -> "PermissionMode":
        """Parse an ``rw|r-|--`` mode string."""
        if not MODE_RE.match(text):
            raise errors.MalformedBody(f"bad mode string: {text!r}")
        bits = text.replace("|", "")
        return cls(
            owner_r=bits[0] == "r",
            owner_w=bits[1] == "w",
            group_r=bits[2] == "r",
            group_w=bits[3] == "w",
            other_r=bits[4] == "r",
            other_w=bits[5] == "w",
        )

    def to_string(self) -> str:
        def pair(r: bool, w: bool) -> str:
            return ("r" if r else "-") + ("w" if w else "-")

        return "|".join(
            (
                pair(self.owner_r, self.owner_w),
                pair(self.group_r, self.group_w),
                pair(self.other_r, self.other_w),
            )
        )


DEFAULT_MODE = PermissionMode.from_string("rw|r-|--")


@dataclass
class UserAccount:
    user_id: str
    login: str
    password_hash: str
    groups: set[str] = field(default_factory=set)
    is_admin: bool = False


@dataclass
class Ownership:
    """Owner/group/mode triple attached to every shareable object."""

    owner: str
    group: str
    mode: PermissionMode


def check_access(user: UserAccount, obj, action: Action) -> bool:
    """Unix first-match-wins access check.

    ``obj`` needs ``owner``, ``group`` and ``mode`` attributes. Admins always
    pass; otherwise exactly one clause (owner, group, other) applies.
    """
    if user.is_admin:
        return True
    mode: PermissionMode = obj.mode
    if user.user_id == obj.owner:
        return mode.owner_w if action is Action.WRITE else mode.owner_r
    if obj.group in user.groups:
        return mode.group_w if action is Action.WRITE else mode.group_r
    return mode.other_w if action is Action.WRITE else mode.other_r


def require_access(user: UserAccount, obj, action: Action, what: str = "object") -> None:
    if not check_access(user, obj, action):
        raise errors.PermissionDenied(f"{action.value} denied on {what}")


# -- password hashing ----------------------------------------------------------

_PBKDF2_ITERATIONS = 60_000


def hash_password(password: str) -> str:
    salt = secrets.token_hex(16)
    digest = hashlib.pbkdf2_hmac(
        "sha256", password.encode("utf-8"), bytes.fromhex(salt), _PBKDF2_ITERATIONS
    )
    return f"pbkdf2${_PBKDF2_ITERATIONS}${salt}${digest.hex()}"


def verify_password(password: str, stored: str) -> bool:
    try:
        _scheme, iterations, salt, expected = stored.split("$")
        digest = hashlib.pbkdf2_hmac(
            "sha256", password.encode("utf-8"), bytes.fromhex(salt), int(iterations)
        )
    except (ValueError, TypeError):
        return False
    return hmac.compare_digest(digest.hex(), expected)


class Accounts:
    """User and group management backed by the shared database."""

    def __init__(self, db: Database):
        self.db = db

    def create_user(
        self,
        login: str,
        password: str,
        is_admin: bool = False,
        extra_groups: list[str] | None = None,
    ) -> UserAccount:
        """Create a user together with its personal group."""
        user_id = uuid.uuid4().hex
        with self.db.transaction() as conn:
            if conn.execute("SELECT 1 FROM users WHERE login = ?", (login,)).fetchone():
                raise errors.DuplicateName(f"login {login!r} already exists")
            conn.execute(
                "INSERT INTO users (user_id, login, password_hash, is_admin) VALUES (?,?,?,?)",
                (user_id, login, hash_password(password), int(is_admin)),
            )
            personal = self._ensure_group(conn, login)
            conn.execute(
                "INSERT INTO user_groups (user_id, group_id) VALUES (?,?)", (user_id, personal)
            )
            for name in extra_groups or []:
                gid = self._ensure_group(conn, name)
                conn.execute(
                    "INSERT OR IGNORE INTO user_groups (user_id, group_id) VALUES (?,?)",
                    (user_id, gid),
                )
        return self.get_user(user_id)

    @staticmethod
    def _ensure_group(conn, name: str) -> str:
        row = conn.execute("SELECT group_id FROM groups WHERE name = ?", (name,)).fetchone()
        if row:
            return row["group_id"]
        gid = uuid.uuid4().hex
        conn.execute("INSERT INTO groups (group_id, name) VALUES (?,?)", (gid, name))
        return gid

    def ensure_group(self, name: str) -> str:
        with self.db.transaction() as conn:
            return self._ensure_group(conn, name)

    def add_to_group(self, user_id: str, group_name: str) -> None:
        with self.db.transaction() as conn:
            gid = self._ensure_group(conn, group_name)
            conn.execute(
                "INSERT OR IGNORE INTO user_groups (user_id, group_id) VALUES (?,?)",
                (user_id, gid),
            )

    def _load(self, row) -> UserAccount:
        groups = {
            r["group_id"]
            for r in self.db.query(
                "SELECT group_id FROM user_groups WHERE user_id = ?", (row["user_id"],)
            )
        }
        return UserAccount(
            user_id=row["user_id"],
            login=row["login"],
            password_hash=row["password_hash"],
            groups=groups,
            is_admin=bool(row["is_admin"]),
        )

    def get_user(self, user_id: str) -> UserAccount:
        row = self.db.query_one("SELECT * FROM users WHERE user_id = ?", (user_id,))
        if row is None:
            raise errors.UnknownUser(f"no user {user_id!r}")
        return self._load(row)

    def find_by_login(self, login: str) -> UserAccount | None:
        row = self.db.query_one("SELECT * FROM users WHERE login = ?", (login,))
        return self._load(row) if row else None

    def list_users(self) -> list[UserAccount]:
        return [self._load(r) for r in self.db.query("SELECT * FROM users ORDER BY login")]

    def group_id_for(self, name: str) -> str:
        row = self.db.query_one("SELECT group_id FROM groups WHERE name = ?", (name,))
        if row is None:
            raise errors.UnknownGroup(f"no group {name!r}")
        return row["group_id"]

    def group_exists(self, group_id: str) -> bool:
        return self.db.query_one("SELECT 1 FROM groups WHERE group_id = ?", (group_id,)) is not None

    def personal_group(self, user: UserAccount) -> str:
        return self.group_id_for(user.login)

    def authenticate(self, login: str, password: str) -> UserAccount:
        """Constant-time credential check; bad user and bad password look alike."""
        user = self.find_by_login(login)
        if user is None:
            # burn comparable time so missing accounts are indistinguishable
            verify_password(password, hash_password("missing-account"))
            raise errors.InvalidCredentials("invalid login or password")
        if not verify_password(password, user.password_hash):
            raise errors.InvalidCredentials("invalid login or password")
        return user


# -- ownership mutation (chmod / chown) ----------------------------------------

OWNABLE_TABLES = {
    "image": ("images", "image_id"),
    "selection": ("selections", "selection_id"),
    "tag": ("tags", "tag_id"),
    "config": ("configs", "config_id"),
    "cart_item": ("cart_items", "item_id"),
}


def _load_ownership(db: Database, object_type: str, object_id: str) -> Ownership:
    try:
        table, key = OWNABLE_TABLES[object_type]
    except KeyError:
        raise errors.MalformedBody(f"unknown object type {object_type!r}")
    row = db.query_one(f"SELECT owner, grp, mode FROM {table} WHERE {key} = ?", (object_id,))
    if row is None:
        raise errors.UnknownReference(f"no {object_type} {object_id!r}")
    return Ownership(owner=row["owner"], group=row["grp"], mode=PermissionMode.from_string(row["mode"]))


def change_mode(
    db: Database, user: UserAccount, object_type: str, object_id: str, new_mode: PermissionMode
) -> Ownership:
    """Replace an object's mode; only the owner or an admin may."""
    current = _load_ownership(db, object_type, object_id)
    if not (user.is_admin or user.user_id == current.owner):
        raise errors.PermissionDenied("only the owner or an admin may change the mode")
    table, key = OWNABLE_TABLES[object_type]
    db.execute(f"UPDATE {table} SET mode = ? WHERE {key} = ?", (new_mode.to_string(), object_id))
    return Ownership(owner=current.owner, group=current.group, mode=new_mode)


def change_owner_group(
    db: Database,
    accounts: Accounts,
    admin: UserAccount,
    object_type: str,
    object_id: str,
    new_owner: str | None = None,
    new_group: str | None = None,
) -> Ownership:
    """Transfer ownership (admin only); the mode is left untouched."""
    if not admin.is_admin:
        raise errors.PermissionDenied("ownership transfer requires an admin")
    current = _load_ownership(db, object_type, object_id)
    owner = new_owner if new_owner is not None else current.owner
    group = new_group if new_group is not None else current.group
    if new_owner is not None:
        accounts.get_user(new_owner)
    if new_group is not None and not accounts.group_exists(new_group):
        raise errors.UnknownGroup(f"no group {new_group!r}")
    table, key = OWNABLE_TABLES[object_type]
    db.execute(f"UPDATE {table} SET owner = ?, grp = ? WHERE {key} = ?", (owner, group, object_id))
    return Ownership(owner=owner, group=group, mode=current.mode)
