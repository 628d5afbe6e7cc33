"""Composition root: wires the store, services, scheduler and sinks together.

Both the HTTP service and the tests build a :class:`Pipeline` and talk to the
same objects, so behaviour cannot diverge between the two entry points.
"""

from __future__ import annotations

import logging
import os
import secrets
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from youpi import errors
from youpi.authz import Accounts, UserAccount
from youpi.catalog import Catalog
from youpi.cluster import (
    CallableRunner,
    EventBus,
    JobKind,
    PolicyStore,
    Scheduler,
    load_nodes,
)
from youpi.ingest import Ingestor, scan_data_paths
from youpi.instruments import get_profile
from youpi.notify import NotificationSink, sink_from_env
from youpi.plugins import (
    CartItem,
    CartService,
    PluginRegistry,
    default_config_content,
    install_mock_tools,
)
from youpi.store import Clock, Database, utcnow

logger = logging.getLogger(__name__)

DEFAULT_ADMIN_LOGIN = "admin"


@dataclass
class PipelineConfig:
    db_path: str = "youpi.db"
    bind_addr: str = "127.0.0.1:8000"
    nodes_file: Optional[str] = None
    tick_ms: int = 250
    notify_sink: Optional[str] = None
    data_dir: Optional[str] = None  # defaults next to the database
    admin_password: Optional[str] = None
    session_ttl_hours: int = 168
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_env(cls, env: Optional[dict] = None) -> "PipelineConfig":
        env = env if env is not None else dict(os.environ)
        return cls(
            db_path=env.get("YOUPI_DB_PATH", "youpi.db"),
            bind_addr=env.get("YOUPI_BIND_ADDR", "127.0.0.1:8000"),
            nodes_file=env.get("YOUPI_NODES_FILE"),
            tick_ms=int(env.get("YOUPI_TICK_MS", "250")),
            notify_sink=env.get("YOUPI_NOTIFY_SINK"),
            admin_password=env.get("YOUPI_ADMIN_PASSWORD"),
        )


class Pipeline:
    def __init__(self, config: PipelineConfig, clock: Clock = utcnow):
        self.config = config
        self.clock = clock
        self.db = Database(config.db_path)
        self.db.migrate()
        data_dir = Path(config.data_dir or Path(config.db_path).resolve().parent / "youpi-data")
        self.data_dir = data_dir
        self.accounts = Accounts(self.db)
        self.catalog = Catalog(self.db, self.accounts)
        self.registry = PluginRegistry(self.db)
        self.cart = CartService(self.db, self.accounts, self.catalog, self.registry)
        self.policies = PolicyStore(self.db)
        self.bus = EventBus(self.db)
        self.sink: NotificationSink = sink_from_env(config.notify_sink)
        self.ingestor = Ingestor(self.db, self.catalog, self.sink)
        nodes = load_nodes(config.nodes_file)
        self.scheduler = Scheduler(
            self.db,
            self.bus,
            nodes,
            jobs_root=data_dir / "jobs",
            clock=clock,
            tick_ms=config.tick_ms,
        )
        self.scheduler.set_ingestion_runner_factory(self._ingestion_runner)
        self.bootstrap()
        self.scheduler.recover()

    def close(self) -> None:
        self.scheduler.stop()
        self.db.close()

    # -- first-run provisioning -------------------------------------------------

    def bootstrap(self) -> None:
        """Idempotent first-run setup: admin account, mock tools, default configs."""
        if not self.accounts.list_users():
            password = self.config.admin_password or secrets.token_urlsafe(12)
            self.accounts.create_user(DEFAULT_ADMIN_LOGIN, password, is_admin=True)
            if self.config.admin_password is None:
                logger.warning("created admin account with generated password: %s", password)
        executables = install_mock_tools(self.data_dir / "bin")
        self.registry.ensure_builtins(executables)
        admin = self.accounts.find_by_login(DEFAULT_ADMIN_LOGIN)
        if admin is None:
            admin = self.accounts.list_users()[0]
        for descriptor in self.registry.list_plugins():
            existing = self.db.query_one(
                "SELECT 1 FROM configs WHERE plugin_id = ? AND name = 'default'",
                (descriptor.plugin_id,),
            )
            if existing is None:
                self.cart.save_config(
                    "default", descriptor.plugin_id, default_config_content(descriptor), admin
                )

    # -- job submission flows ------------------------------------------------------

    def _ingestion_runner(self, ingestion_id: str) -> Callable[[], None]:
        def run() -> None:
            request = self.ingestor.get_request(ingestion_id)
            user = self.accounts.get_user(request["user_id"])
            profile = get_profile(request["instrument"])
            self.ingestor.run_ingestion(
                request["paths"],
                profile,
                user,
                recursive=request["recursive"],
                ingestion_id=ingestion_id,
            )

        return run

    def submit_ingestion(
        self,
        paths: list[str],
        instrument: str,
        user: UserAccount,
        recursive: bool = False,
    ):
        """Queue an ingestion as a monitorable job; returns (job, ingestion_id)."""
        profile = get_profile(instrument)
        # validate before creating any state so bad requests leave no rows
        if not scan_data_paths(paths, recursive=recursive):
            raise errors.EmptyScan(f"no FITS files under {paths!r}")
        ingestion_id = self.ingestor.create_request(paths, profile.instrument_id, user, recursive)
        runner = CallableRunner(self._ingestion_runner(ingestion_id))

        def prepare(job_id: int, workdir: Path):
            argv = ["youpi-ingest", "--id", ingestion_id, "--instrument", profile.instrument_id]
            argv += paths
            return argv, {}, runner

        job = self.scheduler.submit(
            kind=JobKind.INGESTION,
            owner=user,
            description=f"ingestion of {len(paths)} path(s)",
            prepare=prepare,
            ingestion_ref=ingestion_id,
        )
        return job, ingestion_id

    def submit_cart_item(
        self,
        item_id: str,
        user: UserAccount,
        policy_ref: Optional[str] = None,
        static_ref: Optional[str] = None,
    ):
        """Submit a cart item as a processing job; policy evaluated at this moment."""
        item: CartItem = self.cart.load_cart_item(item_id, user)
        policy = static = None
        if policy_ref is None and static_ref is None and item.policy_kind:
            if item.policy_kind == "policy":
                policy_ref = item.policy_id
            else:
                static_ref = item.policy_id
        if policy_ref is not None and static_ref is not None:
            raise errors.MalformedBody("give a policy or a static selection, not both")
        if policy_ref is not None:
            policy = self.policies.get_policy(policy_ref)
        if static_ref is not None:
            static = self.policies.get_static(static_ref)

        descriptor = self.registry.get(item.plugin_id)
        if not descriptor.enabled:
            raise errors.PluginDisabled(f"plugin {item.plugin_id!r} is disabled")

        def prepare(job_id: int, workdir: Path):
            argv, env = self.cart.build_command(item, workdir)
            return argv, env, None

        return self.scheduler.submit(
            kind=JobKind.PROCESSING,
            owner=user,
            description=f"{item.plugin_id} on cart item {item.item_id[:8]}",
            prepare=prepare,
            policy=policy,
            static=static,
            cart_item_ref=item.item_id,
        )
