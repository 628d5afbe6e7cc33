"""Processing plugins, configuration files and the processing cart.

A plugin is a declarative wrapper descriptor around an external executable:
id, display name, command template with placeholders, and default config
keys. The four built-in tools ship as desk-scale mock executables that read
the image list, sleep, write a result manifest and exit on demand; their
scientific namesakes are out of scope.
"""

from __future__ import annotations

import json
import re
import stat
import sys
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
from youpi.catalog import Catalog
from youpi.store import Database, isoformat, parse_ts, utcnow

PLACEHOLDERS = ("EXECUTABLE", "CONFIG_PATH", "IMAGE_LIST_PATH", "OUTPUT_DIR", "EXTRA")
DEFAULT_TEMPLATE = "{EXECUTABLE} -c {CONFIG_PATH} @{IMAGE_LIST_PATH} -o {OUTPUT_DIR}"

BUILTIN_PLUGINS = (
    ("qualityfits", "QualityFITS image quality assessment"),
    ("scamp", "SCAMP astrometric/photometric calibration"),
    ("swarp", "SWarp image resampling and stacking"),
    ("sextractor", "SExtractor source extraction"),
)

CONFIG_LINE_RE = re.compile(r"^(\S+) (.+)$")


@dataclass
class PluginDescriptor:
    plugin_id: str
    display_name: str
    executable: str
    command_template: list[str]
    config_keys: list[tuple[str, str]] = field(default_factory=list)
    enabled: bool = True


@dataclass
class ConfigFile:
    config_id: str
    name: str
    plugin_id: str
    content: str
    owner: str
    group: str
    mode: PermissionMode


@dataclass
class CartItem:
    item_id: str
    plugin_id: str
    config_id: str
    owner: str
    group: str
    mode: PermissionMode
    created_at: datetime
    selection_id: Optional[str] = None
    image_ids: Optional[list[str]] = None
    aux_paths: dict[str, str] = field(default_factory=dict)  # label -> saved path id
    policy_kind: Optional[str] = None  # "policy" | "static"
    policy_id: Optional[str] = None


# -- config file content ---------------------------------------------------------

def parse_config(content: str) -> list[tuple[str, str]]:
    """Flat ``KEY value`` lines; blank lines allowed, anything else is an error."""
    pairs = []
    for lineno, line in enumerate(content.split("\n"), start=1):
        if not line.strip():
            continue
        m = CONFIG_LINE_RE.match(line)
        if not m:
            raise errors.ParseError(f"line {lineno}: expected 'KEY value'", {"line": lineno})
        pairs.append((m.group(1), m.group(2)))
    return pairs


def default_config_content(descriptor: PluginDescriptor) -> str:
    lines = [f"{key} {value}" for key, value in descriptor.config_keys]
    return "\n".join(lines) + "\n" if lines else ""


# -- descriptor files -------------------------------------------------------------

def parse_descriptor_file(text: str) -> PluginDescriptor:
    """Flat key/value descriptor: id, name, executable, template, config_keys."""
    fields: dict[str, str] = {}
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = CONFIG_LINE_RE.match(line.strip())
        if not m:
            raise errors.ParseError(f"line {lineno}: expected 'key value'", {"line": lineno})
        fields[m.group(1)] = m.group(2)
    for required in ("id", "name", "executable", "template"):
        if required not in fields:
            raise errors.ParseError(f"descriptor is missing key {required!r}")
    config_keys = []
    for token in fields.get("config_keys", "").split(","):
        token = token.strip()
        if not token:
            continue
        if "=" not in token:
            raise errors.ParseError(f"bad config_keys entry {token!r}")
        key, default = token.split("=", 1)
        config_keys.append((key, default))
    return PluginDescriptor(
        plugin_id=fields["id"],
        display_name=fields["name"],
        executable=fields["executable"],
        command_template=fields["template"].split(" "),
        config_keys=config_keys,
    )


def render_descriptor_file(descriptor: PluginDescriptor) -> str:
    keys = ",".join(f"{k}={v}" for k, v in descriptor.config_keys)
    return (
        f"id {descriptor.plugin_id}\n"
        f"name {descriptor.display_name}\n"
        f"executable {descriptor.executable}\n"
        f"template {' '.join(descriptor.command_template)}\n"
        f"config_keys {keys}\n"
    )


# -- mock executables ----------------------------------------------------------------

MOCK_TOOL_SOURCE = """#!{python}
# Desk-scale stand-in for {tool}: reads the image list, sleeps, writes a
# result manifest. Controlled by config keys DURATION_MS / EXIT_CODE and the
# YOUPI_MOCK_DURATION_MS / YOUPI_MOCK_EXIT environment overrides.
import os
import sys
import time

def main():
    config_path = None
    list_path = None
    out_dir = "."
    args = sys.argv[1:]
    i = 0
    while i < len(args):
        arg = args[i]
        if arg == "-c" and i + 1 < len(args):
            config_path = args[i + 1]
            i += 2
        elif arg == "-o" and i + 1 < len(args):
            out_dir = args[i + 1]
            i += 2
        elif arg.startswith("@"):
            list_path = arg[1:]
            i += 1
        else:
            i += 1
    config = {{}}
    if config_path and os.path.exists(config_path):
        with open(config_path) as fh:
            for line in fh:
                parts = line.rstrip("\\n").split(" ", 1)
                if len(parts) == 2:
                    config[parts[0]] = parts[1]
    images = []
    if list_path and os.path.exists(list_path):
        with open(list_path) as fh:
            images = [line.rstrip("\\n") for line in fh if line.strip()]
    duration_ms = int(os.environ.get("YOUPI_MOCK_DURATION_MS", config.get("DURATION_MS", "0")))
    exit_code = int(os.environ.get("YOUPI_MOCK_EXIT", config.get("EXIT_CODE", "0")))
    time.sleep(duration_ms / 1000.0)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("STATUS " + ("ok" if exit_code == 0 else "fail") + "\\n")
        for image in images:
            fh.write("PROCESSED " + os.path.basename(image) + "\\n")
    return exit_code

if __name__ == "__main__":
    sys.exit(main())
"""


def install_mock_tools(bin_dir: str | Path) -> dict[str, str]:
    """Write the four mock executables into ``bin_dir``; returns id -> path."""
    root = Path(bin_dir)
    root.mkdir(parents=True, exist_ok=True)
    paths = {}
    for plugin_id, _ in BUILTIN_PLUGINS:
        path = root / plugin_id
        path.write_text(MOCK_TOOL_SOURCE.format(python=sys.executable, tool=plugin_id))
        path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
        paths[plugin_id] = str(path)
    return paths


# -- registry ----------------------------------------------------------------------

class PluginRegistry:
    def __init__(self, db: Database):
        self.db = db

    def ensure_builtins(self, executables: dict[str, str]) -> None:
        """Register the four built-in plugins once, pointing at the mock tools."""
        with self.db.transaction() as conn:
            for plugin_id, display_name in BUILTIN_PLUGINS:
                if conn.execute(
                    "SELECT 1 FROM plugins WHERE plugin_id = ?", (plugin_id,)
                ).fetchone():
                    continue
                conn.execute(
                    "INSERT INTO plugins (plugin_id, display_name, enabled, executable,"
                    " command_template, config_keys) VALUES (?,?,?,?,?,?)",
                    (
                        plugin_id,
                        display_name,
                        1,
                        executables[plugin_id],
                        DEFAULT_TEMPLATE,
                        json.dumps([["DURATION_MS", "0"], ["EXIT_CODE", "0"]]),
                    ),
                )

    def _row_to_descriptor(self, row) -> PluginDescriptor:
        return PluginDescriptor(
            plugin_id=row["plugin_id"],
            display_name=row["display_name"],
            enabled=bool(row["enabled"]),
            executable=row["executable"],
            command_template=row["command_template"].split(" "),
            config_keys=[tuple(pair) for pair in json.loads(row["config_keys"])],
        )

    def list_plugins(self, enabled_only: bool = False) -> list[PluginDescriptor]:
        rows = self.db.query("SELECT * FROM plugins ORDER BY plugin_id")
        plugins = [self._row_to_descriptor(r) for r in rows]
        if enabled_only:
            plugins = [p for p in plugins if p.enabled]
        return plugins

    def get(self, plugin_id: str) -> PluginDescriptor:
        row = self.db.query_one("SELECT * FROM plugins WHERE plugin_id = ?", (plugin_id,))
        if row is None:
            raise errors.UnknownPlugin(f"no plugin {plugin_id!r}")
        return self._row_to_descriptor(row)

    def register(self, descriptor: PluginDescriptor) -> PluginDescriptor:
        if descriptor.command_template.count("{EXECUTABLE}") != 1:
            raise errors.ParseError("template must contain {EXECUTABLE} exactly once")
        with self.db.transaction() as conn:
            if conn.execute(
                "SELECT 1 FROM plugins WHERE plugin_id = ?", (descriptor.plugin_id,)
            ).fetchone():
                raise errors.DuplicateName(f"plugin {descriptor.plugin_id!r} already registered")
            conn.execute(
                "INSERT INTO plugins (plugin_id, display_name, enabled, executable,"
                " command_template, config_keys) VALUES (?,?,?,?,?,?)",
                (
                    descriptor.plugin_id,
                    descriptor.display_name,
                    int(descriptor.enabled),
                    descriptor.executable,
                    " ".join(descriptor.command_template),
                    json.dumps([list(pair) for pair in descriptor.config_keys]),
                ),
            )
        return self.get(descriptor.plugin_id)

    def set_enabled(self, plugin_id: str, flag: bool, user: UserAccount) -> PluginDescriptor:
        if not user.is_admin:
            raise errors.PermissionDenied("plugin toggling requires an admin")
        self.get(plugin_id)
        self.db.execute(
            "UPDATE plugins SET enabled = ? WHERE plugin_id = ?", (int(flag), plugin_id)
        )
        return self.get(plugin_id)


# -- configs and the cart -------------------------------------------------------------

class CartService:
    def __init__(self, db: Database, accounts: Accounts, catalog: Catalog, registry: PluginRegistry):
        self.db = db
        self.accounts = accounts
        self.catalog = catalog
        self.registry = registry

    # configs

    def save_config(
        self, name: str, plugin_id: str, content: str, user: UserAccount
    ) -> ConfigFile:
        parse_config(content)  # raises ParseError with the line number
        self.registry.get(plugin_id)
        group = self.accounts.personal_group(user)
        config_id = uuid.uuid4().hex
        with self.db.transaction() as conn:
            clash = conn.execute(
                "SELECT 1 FROM configs WHERE name = ? AND owner = ? AND plugin_id = ?",
                (name, user.user_id, plugin_id),
            ).fetchone()
            if clash:
                raise errors.DuplicateName(f"config {name!r} already exists for this plugin")
            conn.execute(
                "INSERT INTO configs (config_id, name, plugin_id, content, owner, grp, mode)"
                " VALUES (?,?,?,?,?,?,?)",
                (config_id, name, plugin_id, content, user.user_id, group, DEFAULT_MODE.to_string()),
            )
        return self._get_config_unchecked(config_id)

    def _get_config_unchecked(self, config_id: str) -> ConfigFile:
        row = self.db.query_one("SELECT * FROM configs WHERE config_id = ?", (config_id,))
        if row is None:
            raise errors.UnknownConfig(f"no config {config_id!r}")
        return ConfigFile(
            config_id=row["config_id"],
            name=row["name"],
            plugin_id=row["plugin_id"],
            content=row["content"],
            owner=row["owner"],
            group=row["grp"],
            mode=PermissionMode.from_string(row["mode"]),
        )

    def load_config(self, config_id: str, user: UserAccount) -> ConfigFile:
        config = self._get_config_unchecked(config_id)
        require_access(user, config, Action.READ, f"config {config_id}")
        return config

    def list_configs(self, user: UserAccount, plugin_id: Optional[str] = None) -> list[ConfigFile]:
        sql = "SELECT config_id FROM configs"
        params: tuple = ()
        if plugin_id:
            sql += " WHERE plugin_id = ?"
            params = (plugin_id,)
        sql += " ORDER BY plugin_id, name"
        out = []
        for row in self.db.query(sql, params):
            config = self._get_config_unchecked(row["config_id"])
            if check_access(user, config, Action.READ):
                out.append(config)
        return out

    # cart items

    def create_cart_item(
        self,
        plugin_id: str,
        user: UserAccount,
        selection_id: Optional[str] = None,
        image_ids: Optional[list[str]] = None,
        config_id: str = "",
        aux_paths: Optional[dict[str, str]] = None,
        policy_kind: Optional[str] = None,
        policy_id: Optional[str] = None,
    ) -> CartItem:
        self.registry.get(plugin_id)
        if (selection_id is None) == (image_ids is None):
            raise errors.MalformedBody("exactly one of selection_id / image_ids is required")
        if selection_id is not None:
            selection = self.catalog.get_selection(selection_id)
            require_access(user, selection, Action.READ, f"selection {selection_id}")
            if not selection.image_ids:
                raise errors.EmptyImageSource(f"selection {selection_id!r} is empty")
        else:
            if not image_ids:
                raise errors.EmptyImageSource("explicit image list is empty")
            for image_id in image_ids:
                self.catalog.get_image(image_id)
        config = self.load_config(config_id, user)
        if config.plugin_id != plugin_id:
            raise errors.MalformedBody(
                f"config {config_id!r} belongs to plugin {config.plugin_id!r}"
            )
        aux_paths = aux_paths or {}
        for label, path_id in aux_paths.items():
            self.catalog.get_saved_path(path_id)
            if not re.fullmatch(r"[A-Za-z0-9_]+", label):
                raise errors.MalformedBody(f"bad aux path label {label!r}")
        if policy_kind is not None:
            self._check_policy_ref(policy_kind, policy_id)
        item_id = uuid.uuid4().hex
        group = self.accounts.personal_group(user)
        now = utcnow()
        self.db.execute(
            "INSERT INTO cart_items (item_id, plugin_id, selection_id, image_ids, config_id,"
            " aux_paths, policy_kind, policy_id, owner, grp, mode, created_at)"
            " VALUES (?,?,?,?,?,?,?,?,?,?,?,?)",
            (
                item_id,
                plugin_id,
                selection_id,
                json.dumps(image_ids) if image_ids is not None else None,
                config_id,
                json.dumps(aux_paths),
                policy_kind,
                policy_id,
                user.user_id,
                group,
                DEFAULT_MODE.to_string(),
                isoformat(now),
            ),
        )
        return self.load_cart_item(item_id, user)

    def _check_policy_ref(self, kind: str, policy_id: Optional[str]) -> None:
        if kind not in ("policy", "static"):
            raise errors.MalformedBody(f"policy_kind must be 'policy' or 'static', not {kind!r}")
        table = "policies" if kind == "policy" else "static_selections"
        key = "policy_id" if kind == "policy" else "static_id"
        if not self.db.query_one(f"SELECT 1 FROM {table} WHERE {key} = ?", (policy_id,)):
            raise errors.UnknownPolicy(f"no {kind} {policy_id!r}")

    def _row_to_item(self, row) -> CartItem:
        return CartItem(
            item_id=row["item_id"],
            plugin_id=row["plugin_id"],
            selection_id=row["selection_id"],
            image_ids=json.loads(row["image_ids"]) if row["image_ids"] else None,
            config_id=row["config_id"],
            aux_paths=json.loads(row["aux_paths"]),
            policy_kind=row["policy_kind"],
            policy_id=row["policy_id"],
            owner=row["owner"],
            group=row["grp"],
            mode=PermissionMode.from_string(row["mode"]),
            created_at=parse_ts(row["created_at"]),
        )

    def load_cart_item(self, item_id: str, user: UserAccount) -> CartItem:
        row = self.db.query_one("SELECT * FROM cart_items WHERE item_id = ?", (item_id,))
        if row is None:
            raise errors.UnknownItem(f"no cart item {item_id!r}")
        item = self._row_to_item(row)
        require_access(user, item, Action.READ, f"cart item {item_id}")
        return item

    def list_cart_items(self, user: UserAccount) -> list[CartItem]:
        rows = self.db.query("SELECT * FROM cart_items ORDER BY created_at, item_id")
        return [
            item for item in (self._row_to_item(r) for r in rows)
            if check_access(user, item, Action.READ)
        ]

    # command construction

    def resolve_images(self, item: CartItem) -> list[str]:
        """Absolute input paths for an item, in selection (or list) order."""
        if item.selection_id is not None:
            try:
                selection = self.catalog.get_selection(item.selection_id)
            except errors.UnknownSelection:
                raise errors.UnknownReference(
                    f"cart item {item.item_id}: selection {item.selection_id!r} is gone"
                )
            ids = selection.image_ids
        else:
            ids = item.image_ids or []
        paths = []
        for image_id in ids:
            try:
                paths.append(self.catalog.get_image(image_id).abs_path)
            except errors.UnknownImage:
                raise errors.UnknownReference(
                    f"cart item {item.item_id}: image {image_id!r} is gone"
                )
        if not paths:
            raise errors.EmptyImageSource(f"cart item {item.item_id} resolves to no images")
        return paths

    def build_command(
        self, item: CartItem, job_workdir: str | Path
    ) -> tuple[list[str], dict[str, str]]:
        """Materialize inputs into the workdir and substitute the template.

        Pure function of the item, its config content and image set: identical
        inputs give byte-identical files and argv.
        """
        descriptor = self.registry.get(item.plugin_id)
        if not descriptor.enabled:
            raise errors.PluginDisabled(f"plugin {item.plugin_id!r} is disabled")
        owner = self.accounts.get_user(item.owner)
        config = self.load_config(item.config_id, owner)
        image_paths = self.resolve_images(item)

        workdir = Path(job_workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        list_path = workdir / "images.list"
        list_path.write_text("".join(p + "\n" for p in image_paths), encoding="utf-8")
        config_path = workdir / f"{item.plugin_id}.conf"
        config_path.write_text(config.content, encoding="utf-8")
        output_dir = workdir / "output"
        output_dir.mkdir(exist_ok=True)

        substitutions = {
            "EXECUTABLE": descriptor.executable,
            "CONFIG_PATH": str(config_path),
            "IMAGE_LIST_PATH": str(list_path),
            "OUTPUT_DIR": str(output_dir),
            "EXTRA": "",
        }
        argv = []
        for token in descriptor.command_template:
            expanded = token
            for name, value in substitutions.items():
                expanded = expanded.replace("{%s}" % name, value)
            if expanded:
                argv.append(expanded)
        env = {}
        for label, path_id in sorted(item.aux_paths.items()):
            saved = self.catalog.get_saved_path(path_id)
            env[f"YOUPI_AUX_{label.upper()}"] = saved.path
        return argv, env
