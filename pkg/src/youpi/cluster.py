"""Condor-style job submission and the embedded cluster simulator.

Node-targeting policies are dynamic regex rules evaluated at submit time and
frozen into a requirements expression; static selections are fixed node
lists resolved against the live inventory. The scheduler is a single logical
actor: one tick runs at a time, starting queued jobs FIFO on the first free
matching node and reaping finished processes. Every state transition emits
exactly one monitor event on a strictly increasing sequence.
"""

from __future__ import annotations

import json
import logging
import os
import re
import subprocess
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from queue import Empty, Queue
from typing import Callable, Optional

from youpi import errors
from youpi.authz import UserAccount
from youpi.store import Clock, Database, isoformat, parse_ts, utcnow

logger = logging.getLogger(__name__)

EVENT_RING_SIZE = 10_000
DEFAULT_TICK_MS = 250

NODE_ATTR_DEFAULTS = {"Memory": "8192", "OpSys": "LINUX", "Arch": "X86_64"}


# -- nodes ---------------------------------------------------------------------

@dataclass(frozen=True)
class NodeSpec:
    name: str
    slots: int
    attributes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.slots < 1:
            raise ValueError(f"node {self.name}: slots must be >= 1")
        attrs = dict(NODE_ATTR_DEFAULTS)
        attrs.update(self.attributes)
        attrs["Name"] = self.name
        object.__setattr__(self, "attributes", attrs)


def parse_nodes_file(text: str) -> list[NodeSpec]:
    """One node per line: ``name slots key=value key=value...``."""
    nodes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise errors.ParseError(f"line {lineno}: expected 'name slots ...'", {"line": lineno})
        name = parts[0]
        try:
            slots = int(parts[1])
        except ValueError:
            raise errors.ParseError(f"line {lineno}: bad slot count {parts[1]!r}", {"line": lineno})
        attributes = {}
        for token in parts[2:]:
            if "=" not in token:
                raise errors.ParseError(f"line {lineno}: bad attribute {token!r}", {"line": lineno})
            key, value = token.split("=", 1)
            attributes[key] = value
        try:
            nodes.append(NodeSpec(name=name, slots=slots, attributes=attributes))
        except ValueError as exc:
            raise errors.ParseError(f"line {lineno}: {exc}", {"line": lineno})
    return nodes


def load_nodes(path: Optional[str]) -> list[NodeSpec]:
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_nodes_file(fh.read())
    return [NodeSpec(name="localhost", slots=2)]


# -- policies -------------------------------------------------------------------

class MatchOp(Enum):
    MATCH = "MATCH"
    NOMATCH = "NOMATCH"


@dataclass
class PolicyCriterion:
    attribute: str
    op: MatchOp
    pattern: str


@dataclass
class RequirementsPolicy:
    policy_id: str
    label: str
    criteria: list[PolicyCriterion]


@dataclass
class StaticSelection:
    selection_id: str
    label: str
    node_names: list[str]

    def __post_init__(self):
        if not self.node_names:
            raise errors.MalformedBody("static selection needs at least one node name")
        if len(set(self.node_names)) != len(self.node_names):
            raise errors.MalformedBody("static selection names must be unique")


def compile_policy(policy: RequirementsPolicy) -> list[tuple[str, MatchOp, re.Pattern]]:
    compiled = []
    for index, criterion in enumerate(policy.criteria):
        try:
            pattern = re.compile(criterion.pattern)
        except re.error as exc:
            raise errors.InvalidPattern(
                f"criterion {index}: {exc}", {"criterion": index, "pattern": criterion.pattern}
            )
        compiled.append((criterion.attribute, criterion.op, pattern))
    return compiled


def evaluate_policy(policy: RequirementsPolicy, nodes: list[NodeSpec]) -> list[str]:
    """Names of the nodes satisfying every criterion, sorted by name.

    MATCH means an unanchored search hit on the attribute value (a missing
    attribute never matches); NOMATCH is its exact negation.
    """
    compiled = compile_policy(policy)
    matched = []
    for node in nodes:
        ok = True
        for attribute, op, pattern in compiled:
            value = node.attributes.get(attribute)
            hit = value is not None and pattern.search(value) is not None
            if (op is MatchOp.MATCH) != hit:
                ok = False
                break
        if ok:
            matched.append(node.name)
    return sorted(matched)


def render_requirements(node_names: list[str]) -> str:
    """``(Name == "n1") || (Name == "n2")`` in the given order."""
    if not node_names:
        raise errors.EmptyNodeSet("no nodes to render a requirements expression for")
    return " || ".join(f'(Name == "{name}")' for name in node_names)


_REQ_CLAUSE_RE = re.compile(r'\(Name == "([^"]*)"\)')


def requirements_node_names(expr: str) -> Optional[list[str]]:
    """Node names referenced by a requirements expression; None = unconstrained."""
    if not expr:
        return None
    return _REQ_CLAUSE_RE.findall(expr)


def requirements_allows(expr: str, node_name: str) -> bool:
    names = requirements_node_names(expr)
    return names is None or node_name in names


class PolicyStore:
    """Persisted dynamic policies and static node selections."""

    def __init__(self, db: Database):
        self.db = db

    def create_policy(self, label: str, criteria: list[PolicyCriterion]) -> RequirementsPolicy:
        policy = RequirementsPolicy(policy_id=uuid.uuid4().hex, label=label, criteria=criteria)
        compile_policy(policy)  # validate patterns up front
        payload = json.dumps([[c.attribute, c.op.value, c.pattern] for c in criteria])
        with self.db.transaction() as conn:
            if conn.execute("SELECT 1 FROM policies WHERE label = ?", (label,)).fetchone():
                raise errors.DuplicateName(f"policy {label!r} already exists")
            conn.execute(
                "INSERT INTO policies (policy_id, label, criteria) VALUES (?,?,?)",
                (policy.policy_id, label, payload),
            )
        return policy

    def _row_to_policy(self, row) -> RequirementsPolicy:
        criteria = [
            PolicyCriterion(attribute=a, op=MatchOp(op), pattern=p)
            for a, op, p in json.loads(row["criteria"])
        ]
        return RequirementsPolicy(row["policy_id"], row["label"], criteria)

    def get_policy(self, ref: str) -> RequirementsPolicy:
        row = self.db.query_one(
            "SELECT * FROM policies WHERE policy_id = ? OR label = ?", (ref, ref)
        )
        if row is None:
            raise errors.UnknownPolicy(f"no policy {ref!r}")
        return self._row_to_policy(row)

    def list_policies(self) -> list[RequirementsPolicy]:
        return [self._row_to_policy(r) for r in self.db.query("SELECT * FROM policies ORDER BY label")]

    def create_static(self, label: str, node_names: list[str]) -> StaticSelection:
        selection = StaticSelection(
            selection_id=uuid.uuid4().hex, label=label, node_names=list(node_names)
        )
        with self.db.transaction() as conn:
            if conn.execute(
                "SELECT 1 FROM static_selections WHERE label = ?", (label,)
            ).fetchone():
                raise errors.DuplicateName(f"static selection {label!r} already exists")
            conn.execute(
                "INSERT INTO static_selections (static_id, label, node_names) VALUES (?,?,?)",
                (selection.selection_id, label, json.dumps(selection.node_names)),
            )
        return selection

    def get_static(self, ref: str) -> StaticSelection:
        row = self.db.query_one(
            "SELECT * FROM static_selections WHERE static_id = ? OR label = ?", (ref, ref)
        )
        if row is None:
            raise errors.UnknownPolicy(f"no static selection {ref!r}")
        return StaticSelection(row["static_id"], row["label"], json.loads(row["node_names"]))

    def list_statics(self) -> list[StaticSelection]:
        return [
            StaticSelection(r["static_id"], r["label"], json.loads(r["node_names"]))
            for r in self.db.query("SELECT * FROM static_selections ORDER BY label")
        ]


# -- submission files --------------------------------------------------------------

def generate_submission_file(
    job_id: int,
    argv: list[str],
    env: dict[str, str],
    requirements_expr: str,
    workdir: str,
) -> str:
    """Render the plain-text submission file (LF line endings, fixed key order)."""
    if not argv:
        raise errors.MalformedBody("argv must be non-empty")
    lines = [f"# youpi job {job_id}", "universe = vanilla", f"executable = {argv[0]}"]
    if len(argv) > 1:
        lines.append(f"arguments = {' '.join(argv[1:])}")
    if env:
        joined = ";".join(f"{k}={v}" for k, v in env.items())
        lines.append(f"environment = {joined}")
    if requirements_expr:
        lines.append(f"requirements = {requirements_expr}")
    lines.append(f"initialdir = {workdir}")
    lines.append(f"output = job.{job_id}.out")
    lines.append(f"error = job.{job_id}.err")
    lines.append(f"log = job.{job_id}.log")
    lines.append("queue")
    return "\n".join(lines) + "\n"


def parse_submission_file(text: str) -> dict[str, str]:
    """Recover the ordered key/value map from a generated submission file."""
    out: dict[str, str] = {}
    for line in text.split("\n"):
        if not line or line.startswith("#") or line == "queue":
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise errors.ParseError(f"bad submission line {line!r}")
        out[key] = value
    return out


def parse_environment(value: str) -> dict[str, str]:
    env = {}
    for chunk in value.split(";"):
        if not chunk:
            continue
        key, _, val = chunk.partition("=")
        env[key] = val
    return env


# -- jobs ----------------------------------------------------------------------------

class JobState(Enum):
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"
    CANCELLED = "CANCELLED"


TERMINAL_STATES = {JobState.COMPLETED, JobState.FAILED, JobState.CANCELLED}

LEGAL_TRANSITIONS = {
    JobState.QUEUED: {JobState.RUNNING, JobState.CANCELLED},
    JobState.RUNNING: {JobState.COMPLETED, JobState.FAILED, JobState.CANCELLED},
}


class JobKind(Enum):
    INGESTION = "INGESTION"
    PROCESSING = "PROCESSING"


@dataclass
class Job:
    job_id: int
    kind: JobKind
    owner: str
    description: str
    state: JobState
    queued_at: datetime
    submission_text: str = ""
    requirements_expr: str = ""
    cart_item_ref: Optional[str] = None
    ingestion_ref: Optional[str] = None
    assigned_node: Optional[str] = None
    started_at: Optional[datetime] = None
    finished_at: Optional[datetime] = None
    exit_code: Optional[int] = None
    workdir: str = ""

    def running_time(self, now: datetime) -> float:
        if self.started_at is None:
            return 0.0
        end = self.finished_at or now
        return max(0.0, round((end - self.started_at).total_seconds(), 3))


@dataclass
class MonitorEvent:
    seq: int
    job_id: int
    timestamp: datetime
    description: str
    remote_host: str
    running_time: float
    owner: str
    status: str


# -- event bus -------------------------------------------------------------------------

@dataclass(frozen=True)
class EventFilter:
    owner: Optional[str] = None
    job_id: Optional[int] = None
    status: Optional[str] = None

    def matches(self, event: MonitorEvent) -> bool:
        if self.owner is not None and event.owner != self.owner:
            return False
        if self.job_id is not None and event.job_id != self.job_id:
            return False
        if self.status is not None and event.status != self.status:
            return False
        return True


class Subscription:
    """One subscriber's view: replayed backlog first, then live events, no gaps."""

    def __init__(self, bus: "EventBus", backlog: list[MonitorEvent], filter: EventFilter):
        self._bus = bus
        self._backlog = deque(backlog)
        self._queue: Queue = Queue()
        self._filter = filter
        self._last_seq = 0
        self.closed = False

    def _offer(self, event: MonitorEvent) -> None:
        self._queue.put(event)

    def get(self, timeout: Optional[float] = None) -> Optional[MonitorEvent]:
        """Next event, or None on timeout. Delivery order is strict seq order."""
        while True:
            if self._backlog:
                event = self._backlog.popleft()
            else:
                try:
                    event = self._queue.get(timeout=timeout)
                except Empty:
                    return None
            if event.seq <= self._last_seq:
                continue
            self._last_seq = event.seq
            return event

    def close(self) -> None:
        self.closed = True
        self._bus._detach(self)


class EventBus:
    """Monotonic event sequence with a bounded replay ring and DB history."""

    def __init__(self, db: Database):
        self.db = db
        self._lock = threading.Lock()
        self._ring: deque[MonitorEvent] = deque(maxlen=EVENT_RING_SIZE)
        self._subs: list[tuple[Subscription, EventFilter]] = []

    def emit(self, job: Job, now: datetime) -> MonitorEvent:
        with self._lock:
            with self.db.transaction() as conn:
                cursor = conn.execute(
                    "INSERT INTO events (job_id, timestamp, description, remote_host,"
                    " running_time, owner, status) VALUES (?,?,?,?,?,?,?)",
                    (
                        job.job_id,
                        isoformat(now),
                        job.description,
                        job.assigned_node or "-",
                        job.running_time(now),
                        job.owner,
                        job.state.value,
                    ),
                )
                seq = cursor.lastrowid
            event = MonitorEvent(
                seq=seq,
                job_id=job.job_id,
                timestamp=now,
                description=job.description,
                remote_host=job.assigned_node or "-",
                running_time=job.running_time(now),
                owner=job.owner,
                status=job.state.value,
            )
            self._ring.append(event)
            for sub, flt in self._subs:
                if flt.matches(event):
                    sub._offer(event)
            return event

    def subscribe(
        self,
        from_seq: int = 0,
        owner: Optional[str] = None,
        job_id: Optional[int] = None,
        status: Optional[str] = None,
    ) -> Subscription:
        """Replay all retained events with seq > from_seq, then stream live ones.

        The backlog comes from the persistent history, so it is complete even
        past the in-memory ring.
        """
        flt = EventFilter(owner=owner, job_id=job_id, status=status)
        with self._lock:
            rows = self.db.query(
                "SELECT * FROM events WHERE seq > ? ORDER BY seq", (from_seq,)
            )
            backlog = [
                MonitorEvent(
                    seq=r["seq"],
                    job_id=r["job_id"],
                    timestamp=parse_ts(r["timestamp"]),
                    description=r["description"],
                    remote_host=r["remote_host"],
                    running_time=r["running_time"],
                    owner=r["owner"],
                    status=r["status"],
                )
                for r in rows
            ]
            backlog = [e for e in backlog if flt.matches(e)]
            sub = Subscription(self, backlog, flt)
            self._subs.append((sub, flt))
            return sub

    def _detach(self, sub: Subscription) -> None:
        with self._lock:
            self._subs = [(s, f) for s, f in self._subs if s is not sub]


# -- runners ------------------------------------------------------------------------------

class ProcessRunner:
    """Spawns the job's argv in its workdir, wiring job.<id>.out/.err files."""

    def __init__(self, argv: list[str], env: dict[str, str], workdir: str, job_id: int):
        self.argv = argv
        self.env = env
        self.workdir = workdir
        self.job_id = job_id
        self._proc: Optional[subprocess.Popen] = None
        self._files: list = []

    def start(self) -> None:
        out = open(Path(self.workdir) / f"job.{self.job_id}.out", "wb")
        err = open(Path(self.workdir) / f"job.{self.job_id}.err", "wb")
        self._files = [out, err]
        merged_env = dict(os.environ)
        merged_env.update(self.env)
        try:
            self._proc = subprocess.Popen(
                self.argv, cwd=self.workdir, env=merged_env, stdout=out, stderr=err
            )
        except OSError:
            self._close_files()
            raise

    def poll(self) -> Optional[int]:
        if self._proc is None:
            return 127
        code = self._proc.poll()
        if code is not None:
            self._close_files()
        return code

    def terminate(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()
            try:
                self._proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                logger.warning("job %d did not die on SIGKILL", self.job_id)
        self._close_files()

    def _close_files(self) -> None:
        for fh in self._files:
            try:
                fh.close()
            except OSError:
                pass
        self._files = []


class CallableRunner:
    """Runs a Python callable on a worker thread (used by ingestion jobs)."""

    def __init__(self, fn: Callable[[], None]):
        self._fn = fn
        self._thread: Optional[threading.Thread] = None
        self._exit: Optional[int] = None

    def start(self) -> None:
        def wrapper():
            try:
                self._fn()
                self._exit = 0
            except Exception:
                logger.exception("in-process job failed")
                self._exit = 1

        self._thread = threading.Thread(target=wrapper, daemon=True)
        self._thread.start()

    def poll(self) -> Optional[int]:
        if self._thread is None:
            return 127
        if self._thread.is_alive():
            return None
        return self._exit if self._exit is not None else 1

    def terminate(self) -> None:
        # threads cannot be killed; the job is marked cancelled and the
        # worker's late result is discarded
        pass


# -- scheduler ---------------------------------------------------------------------------

@dataclass
class _Pending:
    argv: list[str]
    env: dict[str, str]
    runner: Optional[object] = None  # prebuilt runner (ingestion); else ProcessRunner


@dataclass
class _Running:
    runner: object
    node: str


PrepareFn = Callable[[int, Path], tuple[list[str], dict[str, str], Optional[object]]]


class Scheduler:
    """Embedded cluster simulator speaking the submission-file format."""

    def __init__(
        self,
        db: Database,
        bus: EventBus,
        nodes: list[NodeSpec],
        jobs_root: str | Path,
        clock: Clock = utcnow,
        tick_ms: int = DEFAULT_TICK_MS,
    ):
        self.db = db
        self.bus = bus
        self.nodes = sorted(nodes, key=lambda n: n.name)
        self.jobs_root = Path(jobs_root)
        self.jobs_root.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self.tick_ms = tick_ms
        self._lock = threading.RLock()
        self._pending: dict[int, _Pending] = {}
        self._running: dict[int, _Running] = {}
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self._ingestion_runner_factory: Optional[Callable[[str], Callable[[], None]]] = None

    # -- persistence helpers ------------------------------------------------------

    def _row_to_job(self, row) -> Job:
        return Job(
            job_id=row["job_id"],
            kind=JobKind(row["kind"]),
            cart_item_ref=row["cart_item_ref"],
            ingestion_ref=row["ingestion_ref"],
            owner=row["owner"],
            description=row["description"],
            submission_text=row["submission_text"],
            requirements_expr=row["requirements_expr"],
            state=JobState(row["state"]),
            assigned_node=row["assigned_node"],
            queued_at=parse_ts(row["queued_at"]),
            started_at=parse_ts(row["started_at"]),
            finished_at=parse_ts(row["finished_at"]),
            exit_code=row["exit_code"],
            workdir=row["workdir"],
        )

    def get_job(self, job_id: int) -> Job:
        row = self.db.query_one("SELECT * FROM jobs WHERE job_id = ?", (job_id,))
        if row is None:
            raise errors.UnknownJob(f"no job {job_id}")
        return self._row_to_job(row)

    def list_jobs(
        self, owner: Optional[str] = None, state: Optional[str] = None
    ) -> list[Job]:
        sql = "SELECT * FROM jobs"
        clauses, params = [], []
        if owner is not None:
            clauses.append("owner = ?")
            params.append(owner)
        if state is not None:
            clauses.append("state = ?")
            params.append(state)
        if clauses:
            sql += " WHERE " + " AND ".join(clauses)
        sql += " ORDER BY job_id"
        return [self._row_to_job(r) for r in self.db.query(sql, tuple(params))]

    def _persist(self, job: Job) -> None:
        self.db.execute(
            """UPDATE jobs SET state = ?, assigned_node = ?, started_at = ?, finished_at = ?,
                   exit_code = ?, submission_text = ?, requirements_expr = ?, workdir = ?
               WHERE job_id = ?""",
            (
                job.state.value,
                job.assigned_node,
                isoformat(job.started_at),
                isoformat(job.finished_at),
                job.exit_code,
                job.submission_text,
                job.requirements_expr,
                job.workdir,
                job.job_id,
            ),
        )

    def _transition(self, job: Job, new_state: JobState, now: datetime) -> None:
        allowed = LEGAL_TRANSITIONS.get(job.state, set())
        if new_state not in allowed:
            raise errors.YoupiError(f"illegal transition {job.state.value} -> {new_state.value}")
        job.state = new_state
        if new_state is JobState.RUNNING:
            job.started_at = now
        if new_state in TERMINAL_STATES:
            job.finished_at = now
        self._persist(job)
        self.bus.emit(job, now)

    # -- submission -----------------------------------------------------------------

    def resolve_requirements(
        self,
        policy: Optional[RequirementsPolicy] = None,
        static: Optional[StaticSelection] = None,
    ) -> str:
        """Compute the requirements expression against the live inventory, now."""
        if policy is not None and static is not None:
            raise errors.MalformedBody("give a policy or a static selection, not both")
        if policy is not None:
            matched = evaluate_policy(policy, self.nodes)
            if not matched:
                raise errors.EmptyNodeSet(f"policy {policy.label!r} matched no node")
            return render_requirements(matched)
        if static is not None:
            live = {n.name for n in self.nodes}
            alive = [name for name in static.node_names if name in live]
            if not alive:
                raise errors.EmptyNodeSet(f"static selection {static.label!r} names no live node")
            return render_requirements(alive)
        return ""

    def submit(
        self,
        kind: JobKind,
        owner: UserAccount,
        description: str,
        prepare: PrepareFn,
        policy: Optional[RequirementsPolicy] = None,
        static: Optional[StaticSelection] = None,
        cart_item_ref: Optional[str] = None,
        ingestion_ref: Optional[str] = None,
    ) -> Job:
        """Create a QUEUED job: policy is evaluated NOW and frozen.

        ``prepare(job_id, workdir)`` returns (argv, env, runner-or-None) and
        may raise; any failure leaves no job row behind.
        """
        now = self.clock()
        with self._lock:
            requirements_expr = self.resolve_requirements(policy=policy, static=static)
            with self.db.transaction() as conn:
                cursor = conn.execute(
                    "INSERT INTO jobs (kind, cart_item_ref, ingestion_ref, owner, description,"
                    " state, queued_at) VALUES (?,?,?,?,?,?,?)",
                    (
                        kind.value,
                        cart_item_ref,
                        ingestion_ref,
                        owner.user_id,
                        description,
                        JobState.QUEUED.value,
                        isoformat(now),
                    ),
                )
                job_id = cursor.lastrowid
                workdir = self.jobs_root / f"job.{job_id}"
                workdir.mkdir(parents=True, exist_ok=True)
                argv, env, runner = prepare(job_id, workdir)
                submission_text = generate_submission_file(
                    job_id, argv, env, requirements_expr, str(workdir)
                )
                conn.execute(
                    "UPDATE jobs SET submission_text = ?, requirements_expr = ?, workdir = ?"
                    " WHERE job_id = ?",
                    (submission_text, requirements_expr, str(workdir), job_id),
                )
            job = self.get_job(job_id)
            self._pending[job_id] = _Pending(argv=argv, env=env, runner=runner)
            self.bus.emit(job, now)
            return job

    # -- lifecycle --------------------------------------------------------------------

    def set_ingestion_runner_factory(
        self, factory: Callable[[str], Callable[[], None]]
    ) -> None:
        self._ingestion_runner_factory = factory

    def recover(self) -> None:
        """Rebuild scheduler state from the database after a restart.

        Jobs that were RUNNING lost their process and are marked FAILED;
        QUEUED jobs are re-armed from their submission text (or the stored
        ingestion request for ingestion jobs).
        """
        now = self.clock()
        with self._lock:
            for job in self.list_jobs(state=JobState.RUNNING.value):
                logger.warning("job %d orphaned by restart; marking FAILED", job.job_id)
                self._transition(job, JobState.FAILED, now)
            for job in self.list_jobs(state=JobState.QUEUED.value):
                if job.job_id in self._pending:
                    continue
                fields = parse_submission_file(job.submission_text)
                arguments = fields.get("arguments", "")
                argv = [fields["executable"]] + (arguments.split(" ") if arguments else [])
                env = parse_environment(fields.get("environment", ""))
                runner = None
                if job.kind is JobKind.INGESTION and self._ingestion_runner_factory:
                    runner = CallableRunner(self._ingestion_runner_factory(job.ingestion_ref))
                self._pending[job.job_id] = _Pending(argv=argv, env=env, runner=runner)

    def node_load(self) -> dict[str, int]:
        with self._lock:
            load = {node.name: 0 for node in self.nodes}
            for running in self._running.values():
                load[running.node] = load.get(running.node, 0) + 1
            return load

    def tick(self, now: Optional[datetime] = None) -> list[tuple[int, str, str]]:
        """One scheduling step; returns (job_id, old_state, new_state) transitions."""
        now = now or self.clock()
        transitions: list[tuple[int, str, str]] = []
        with self._lock:
            # reap finished work first so slots free up within the same tick
            for job_id, running in list(self._running.items()):
                code = running.runner.poll()
                if code is None:
                    continue
                del self._running[job_id]
                job = self.get_job(job_id)
                if job.state is not JobState.RUNNING:
                    continue  # cancelled concurrently
                job.exit_code = code
                new_state = JobState.COMPLETED if code == 0 else JobState.FAILED
                self._transition(job, new_state, now)
                transitions.append((job_id, JobState.RUNNING.value, new_state.value))

            load = {node.name: 0 for node in self.nodes}
            for running in self._running.values():
                load[running.node] = load.get(running.node, 0) + 1

            queued = self.db.query(
                "SELECT job_id FROM jobs WHERE state = ? ORDER BY queued_at, job_id",
                (JobState.QUEUED.value,),
            )
            for row in queued:
                job_id = row["job_id"]
                pending = self._pending.get(job_id)
                if pending is None:
                    continue  # not armed (restart without recover())
                job = self.get_job(job_id)
                target = None
                for node in self.nodes:  # name order
                    if load[node.name] >= node.slots:
                        continue
                    if requirements_allows(job.requirements_expr, node.name):
                        target = node
                        break
                if target is None:
                    continue
                runner = pending.runner or ProcessRunner(
                    pending.argv, pending.env, job.workdir, job_id
                )
                job.assigned_node = target.name
                try:
                    runner.start()
                except OSError as exc:
                    logger.error("job %d failed to spawn: %s", job_id, exc)
                    del self._pending[job_id]
                    self._transition(job, JobState.RUNNING, now)
                    job.exit_code = 127
                    self._transition(job, JobState.FAILED, now)
                    transitions.append((job_id, JobState.QUEUED.value, JobState.FAILED.value))
                    continue
                del self._pending[job_id]
                self._running[job_id] = _Running(runner=runner, node=target.name)
                load[target.name] += 1
                self._transition(job, JobState.RUNNING, now)
                transitions.append((job_id, JobState.QUEUED.value, JobState.RUNNING.value))
        return transitions

    def cancel_job(self, job_id: int, user: UserAccount) -> Job:
        now = self.clock()
        with self._lock:
            job = self.get_job(job_id)
            if not (user.is_admin or user.user_id == job.owner):
                raise errors.PermissionDenied("only the job owner or an admin may cancel")
            if job.state in TERMINAL_STATES:
                raise errors.AlreadyTerminal(f"job {job_id} is already {job.state.value}")
            if job.state is JobState.RUNNING:
                running = self._running.pop(job_id, None)
                if running is not None:
                    running.runner.terminate()
            else:
                self._pending.pop(job_id, None)
            self._transition(job, JobState.CANCELLED, now)
            return job

    # -- background driving ---------------------------------------------------------

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()

        def loop():
            while not self._stop.wait(self.tick_ms / 1000.0):
                try:
                    self.tick()
                except Exception:
                    logger.exception("scheduler tick failed")

        self._thread = threading.Thread(target=loop, daemon=True, name="youpi-scheduler")
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stop.set()
        self._thread.join(timeout=5)
        self._thread = None

    def wait_all_terminal(self, timeout: float = 60.0) -> bool:
        """Test/ops helper: block until no QUEUED or RUNNING jobs remain."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            rows = self.db.query(
                "SELECT COUNT(*) AS n FROM jobs WHERE state IN (?,?)",
                (JobState.QUEUED.value, JobState.RUNNING.value),
            )
            if rows[0]["n"] == 0:
                return True
            time.sleep(0.02)
        return False
