"""HTTP service: JSON endpoints over every pipeline operation plus a live
server-sent event stream for monitoring.

Authentication is bearer-token sessions from ``POST /api/auth``. Module
errors map 1:1 onto stable ApiError codes; malformed bodies are 400
MALFORMED_BODY, never a 500. All mutations are transactional.
"""

from __future__ import annotations

import json
import logging
import secrets
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Iterator, Optional

from fastapi import Depends, FastAPI, Header, Query as QueryParam, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse, StreamingResponse
from pydantic import BaseModel, Field
from starlette.exceptions import HTTPException as StarletteHTTPException

from youpi import errors
from youpi.app import Pipeline, PipelineConfig
from youpi.authz import Action, PermissionMode, UserAccount, change_mode, change_owner_group, require_access
from youpi.catalog import ImageRecord, ImportReport, Query, Selection
from youpi.cluster import Job, MatchOp, MonitorEvent, PolicyCriterion
from youpi.ingest import IngestionReport
from youpi.plugins import CartItem, ConfigFile, PluginDescriptor, parse_descriptor_file
from youpi.store import isoformat, parse_ts

logger = logging.getLogger(__name__)

SESSION_TOKEN_BYTES = 32  # 256-bit tokens


@dataclass
class Session:
    token: str
    user_id: str
    created_at: datetime
    expires_at: datetime


class Sessions:
    def __init__(self, pipeline: Pipeline):
        self.pipeline = pipeline
        self.ttl = timedelta(hours=pipeline.config.session_ttl_hours)

    def create(self, user: UserAccount) -> Session:
        now = self.pipeline.clock()
        session = Session(
            token=secrets.token_hex(SESSION_TOKEN_BYTES),
            user_id=user.user_id,
            created_at=now,
            expires_at=now + self.ttl,
        )
        self.pipeline.db.execute(
            "INSERT INTO sessions (token, user_id, created_at, expires_at) VALUES (?,?,?,?)",
            (session.token, session.user_id, isoformat(now), isoformat(session.expires_at)),
        )
        return session

    def resolve(self, token: str) -> UserAccount:
        row = self.pipeline.db.query_one(
            "SELECT * FROM sessions WHERE token = ?", (token,)
        )
        if row is None:
            raise errors.AuthRequired("unknown session token")
        if parse_ts(row["expires_at"]) <= self.pipeline.clock():
            raise errors.AuthRequired("session expired")
        return self.pipeline.accounts.get_user(row["user_id"])


# -- serialization ----------------------------------------------------------------

def image_to_json(img: ImageRecord) -> dict:
    return {
        "image_id": img.image_id,
        "filename": img.filename,
        "abs_path": img.abs_path,
        "checksum": img.checksum,
        "instrument": img.instrument,
        "run_id": img.run_id,
        "filter": img.filter,
        "object": img.object,
        "date_obs": isoformat(img.date_obs),
        "exptime": img.exptime,
        "grade": img.grade,
        "ingestion_id": img.ingestion_id,
        "owner": img.owner,
        "group": img.group,
        "mode": img.mode.to_string(),
        "tags": sorted(img.tags),
    }


def selection_to_json(sel: Selection) -> dict:
    return {
        "selection_id": sel.selection_id,
        "name": sel.name,
        "image_ids": sel.image_ids,
        "count": len(sel.image_ids),
        "owner": sel.owner,
        "group": sel.group,
        "mode": sel.mode.to_string(),
    }


def import_report_to_json(report: ImportReport) -> dict:
    return {
        "resolved": len(report.resolved),
        "unresolved": [
            {"line": lineno, "filename": filename, "reason": reason}
            for lineno, filename, reason in report.unresolved
        ],
        "mismatched": [
            {"line": lineno, "filename": filename} for lineno, filename in report.mismatched
        ],
    }


def plugin_to_json(p: PluginDescriptor) -> dict:
    return {
        "plugin_id": p.plugin_id,
        "display_name": p.display_name,
        "enabled": p.enabled,
        "executable": p.executable,
        "command_template": p.command_template,
        "config_keys": [{"key": k, "default": v} for k, v in p.config_keys],
    }


def config_to_json(c: ConfigFile) -> dict:
    return {
        "config_id": c.config_id,
        "name": c.name,
        "plugin_id": c.plugin_id,
        "content": c.content,
        "owner": c.owner,
        "group": c.group,
        "mode": c.mode.to_string(),
    }


def cart_item_to_json(item: CartItem) -> dict:
    return {
        "item_id": item.item_id,
        "plugin_id": item.plugin_id,
        "selection_id": item.selection_id,
        "image_ids": item.image_ids,
        "config_id": item.config_id,
        "aux_paths": item.aux_paths,
        "policy_kind": item.policy_kind,
        "policy_id": item.policy_id,
        "owner": item.owner,
        "group": item.group,
        "mode": item.mode.to_string(),
        "created_at": isoformat(item.created_at),
    }


def job_to_json(job: Job) -> dict:
    return {
        "job_id": job.job_id,
        "kind": job.kind.value,
        "cart_item_ref": job.cart_item_ref,
        "ingestion_ref": job.ingestion_ref,
        "owner": job.owner,
        "description": job.description,
        "submission_text": job.submission_text,
        "requirements_expr": job.requirements_expr,
        "state": job.state.value,
        "assigned_node": job.assigned_node,
        "queued_at": isoformat(job.queued_at),
        "started_at": isoformat(job.started_at),
        "finished_at": isoformat(job.finished_at),
        "exit_code": job.exit_code,
        "workdir": job.workdir,
    }


def event_to_json(event: MonitorEvent) -> dict:
    return {
        "seq": event.seq,
        "job_id": event.job_id,
        "timestamp": isoformat(event.timestamp),
        "description": event.description,
        "remote_host": event.remote_host,
        "running_time": event.running_time,
        "owner": event.owner,
        "status": event.status,
    }


def ingestion_report_to_json(report: IngestionReport) -> dict:
    return {
        "ingestion_id": report.ingestion_id,
        "user_id": report.user_id,
        "requested_paths": report.requested_paths,
        "ingested": report.ingested,
        "skipped_duplicates": report.skipped_duplicates,
        "failed": [{"path": path, "error": code} for path, code in report.failed],
        "started_at": isoformat(report.started_at),
        "finished_at": isoformat(report.finished_at),
    }


# -- request bodies ------------------------------------------------------------------

class AuthBody(BaseModel):
    login: str
    password: str


class IngestBody(BaseModel):
    paths: list[str]
    instrument: str
    recursive: bool = False


class SelectionBody(BaseModel):
    name: str
    image_ids: list[str]


class MergeBody(BaseModel):
    target_name: str
    source_ids: list[str]


class ImportBody(BaseModel):
    name: str
    text: str


class ImportDirBody(BaseModel):
    dir: str


class TagApplyBody(BaseModel):
    tag: str
    mark: bool = True
    image_ids: Optional[list[str]] = None
    selection_id: Optional[str] = None
    selection_name: Optional[str] = None


class GradeBody(BaseModel):
    image_ids: list[str]
    grade: Optional[str] = None


class ConfigBody(BaseModel):
    name: str
    plugin_id: str
    content: str


class PluginRegisterBody(BaseModel):
    descriptor_text: str


class PluginEnableBody(BaseModel):
    enabled: bool


class CartBody(BaseModel):
    plugin_id: str
    config_id: str
    selection_id: Optional[str] = None
    image_ids: Optional[list[str]] = None
    aux_paths: dict[str, str] = Field(default_factory=dict)
    policy_kind: Optional[str] = None
    policy_id: Optional[str] = None


class SubmitBody(BaseModel):
    cart_item_id: str
    policy: Optional[str] = None
    static: Optional[str] = None


class CriterionBody(BaseModel):
    attribute: str
    op: str
    pattern: str


class PolicyBody(BaseModel):
    kind: str  # "dynamic" | "static"
    label: str
    criteria: Optional[list[CriterionBody]] = None
    node_names: Optional[list[str]] = None


class ChmodBody(BaseModel):
    object_type: str
    object_id: str
    mode: str


class ChownBody(BaseModel):
    object_type: str
    object_id: str
    owner: Optional[str] = None
    group: Optional[str] = None


class UserBody(BaseModel):
    login: str
    password: str
    is_admin: bool = False
    groups: list[str] = Field(default_factory=list)


class SavedPathBody(BaseModel):
    path: str


# -- app factory ------------------------------------------------------------------------

def create_app(pipeline: Pipeline) -> FastAPI:
    app = FastAPI(title="youpi", docs_url=None, redoc_url=None)
    sessions = Sessions(pipeline)
    app.state.pipeline = pipeline

    def current_user(authorization: Optional[str] = Header(default=None)) -> UserAccount:
        if not authorization or not authorization.startswith("Bearer "):
            raise errors.AuthRequired("missing bearer token")
        return sessions.resolve(authorization.removeprefix("Bearer "))

    @app.exception_handler(errors.YoupiError)
    async def youpi_error_handler(request: Request, exc: errors.YoupiError):
        return JSONResponse(status_code=exc.http_status, content=exc.to_payload())

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"code": "MALFORMED_BODY", "message": "request body failed validation"},
        )

    @app.exception_handler(StarletteHTTPException)
    async def http_error_handler(request: Request, exc: StarletteHTTPException):
        code = "UNKNOWN_ROUTE" if exc.status_code in (404, 405) else "INTERNAL"
        return JSONResponse(
            status_code=exc.status_code, content={"code": code, "message": str(exc.detail)}
        )

    @app.exception_handler(Exception)
    async def fallback_handler(request: Request, exc: Exception):
        logger.exception("unhandled error on %s", request.url.path)
        return JSONResponse(
            status_code=500, content={"code": "INTERNAL", "message": "internal error"}
        )

    # -- health / auth ------------------------------------------------------------

    @app.get("/api/health")
    def health():
        return {"ok": True}

    @app.post("/api/auth")
    def auth(body: AuthBody):
        user = pipeline.accounts.authenticate(body.login, body.password)
        session = sessions.create(user)
        return {
            "token": session.token,
            "user_id": user.user_id,
            "login": user.login,
            "is_admin": user.is_admin,
            "expires_at": isoformat(session.expires_at),
        }

    # -- ingestion ----------------------------------------------------------------

    @app.post("/api/ingest")
    def ingest(body: IngestBody, user: UserAccount = Depends(current_user)):
        job, ingestion_id = pipeline.submit_ingestion(
            body.paths, body.instrument, user, recursive=body.recursive
        )
        return {"job_id": job.job_id, "ingestion_id": ingestion_id}

    @app.get("/api/ingest/{ingestion_id}")
    def ingest_report(ingestion_id: str, user: UserAccount = Depends(current_user)):
        return ingestion_report_to_json(pipeline.ingestor.get_report(ingestion_id))

    # -- images ----------------------------------------------------------------------

    @app.get("/api/images")
    def images(
        user: UserAccount = Depends(current_user),
        run_id: Optional[str] = None,
        filter: Optional[str] = None,
        instrument: Optional[str] = None,
        grade: Optional[str] = None,
        tag: Optional[str] = None,
        filename_glob: Optional[str] = None,
        ingestion_id: Optional[str] = None,
        date_from: Optional[str] = None,
        date_to: Optional[str] = None,
        in_selection: Optional[str] = None,
    ):
        q = Query(
            run_id=run_id,
            filter=filter,
            instrument=instrument,
            grade=grade,
            has_tag=tag,
            filename_glob=filename_glob,
            ingestion_id=ingestion_id,
            date_from=parse_ts(date_from),
            date_to=parse_ts(date_to),
            in_selection=in_selection,
        )
        return [image_to_json(img) for img in pipeline.catalog.query_images(q, user)]

    @app.post("/api/images/grade")
    def set_grade(body: GradeBody, user: UserAccount = Depends(current_user)):
        affected = pipeline.catalog.set_grade(body.image_ids, body.grade, user)
        return {"affected": affected}

    # -- selections --------------------------------------------------------------------

    @app.get("/api/selections")
    def selections(user: UserAccount = Depends(current_user)):
        return [selection_to_json(s) for s in pipeline.catalog.list_selections(user)]

    @app.post("/api/selections")
    def save_selection(body: SelectionBody, user: UserAccount = Depends(current_user)):
        return selection_to_json(pipeline.catalog.save_selection(body.name, body.image_ids, user))

    @app.get("/api/selections/{selection_id}")
    def get_selection(selection_id: str, user: UserAccount = Depends(current_user)):
        selection = pipeline.catalog.get_selection(selection_id)
        require_access(user, selection, Action.READ, "selection")
        return selection_to_json(selection)

    @app.delete("/api/selections/{selection_id}")
    def delete_selection(selection_id: str, user: UserAccount = Depends(current_user)):
        pipeline.catalog.delete_selection(selection_id, user)
        return {"deleted": selection_id}

    @app.post("/api/selections/merge")
    def merge_selections(body: MergeBody, user: UserAccount = Depends(current_user)):
        return selection_to_json(
            pipeline.catalog.merge_selections(body.target_name, body.source_ids, user)
        )

    @app.post("/api/selections/import")
    def import_selection(body: ImportBody, user: UserAccount = Depends(current_user)):
        selection, report = pipeline.catalog.import_selection_text(body.name, body.text, user)
        return {
            "selection": selection_to_json(selection),
            "report": import_report_to_json(report),
        }

    @app.post("/api/selections/import-dir")
    def import_dir(body: ImportDirBody, user: UserAccount = Depends(current_user)):
        results = pipeline.catalog.batch_import_selections(body.dir, user)
        out = []
        for entry in results:
            item = {"file": entry["file"], "name": entry["name"]}
            if "selection_id" in entry:
                item["selection_id"] = entry["selection_id"]
                item["report"] = import_report_to_json(entry["report"])
            else:
                item["error"] = entry["error"]
                item["message"] = entry.get("message", "")
            out.append(item)
        return out

    @app.get("/api/selections/{selection_id}/export", response_class=PlainTextResponse)
    def export_selection(selection_id: str, user: UserAccount = Depends(current_user)):
        return pipeline.catalog.export_selection_text(selection_id, user)

    # -- tags -------------------------------------------------------------------------

    @app.get("/api/tags")
    def tags(user: UserAccount = Depends(current_user)):
        return [
            {
                "tag_id": t.tag_id,
                "name": t.name,
                "style": t.style,
                "owner": t.owner,
                "group": t.group,
                "mode": t.mode.to_string(),
            }
            for t in pipeline.catalog.list_tags()
        ]

    @app.post("/api/tags/apply")
    def apply_tag(body: TagApplyBody, user: UserAccount = Depends(current_user)):
        image_ids = body.image_ids
        if image_ids is None and body.selection_id is not None:
            image_ids = pipeline.catalog.get_selection(body.selection_id).image_ids
        if image_ids is None and body.selection_name is not None:
            image_ids = pipeline.catalog.find_selection_by_name(body.selection_name, user).image_ids
        if image_ids is None:
            raise errors.MalformedBody("one of image_ids / selection_id / selection_name required")
        affected = pipeline.catalog.apply_tag(body.tag, image_ids, body.mark, user)
        return {"affected": affected}

    # -- plugins / configs ----------------------------------------------------------------

    @app.get("/api/plugins")
    def plugins(enabled_only: bool = False, user: UserAccount = Depends(current_user)):
        return [plugin_to_json(p) for p in pipeline.registry.list_plugins(enabled_only)]

    @app.post("/api/plugins")
    def register_plugin(body: PluginRegisterBody, user: UserAccount = Depends(current_user)):
        if not user.is_admin:
            raise errors.PermissionDenied("plugin registration requires an admin")
        descriptor = parse_descriptor_file(body.descriptor_text)
        return plugin_to_json(pipeline.registry.register(descriptor))

    @app.post("/api/plugins/{plugin_id}/enabled")
    def set_plugin_enabled(
        plugin_id: str, body: PluginEnableBody, user: UserAccount = Depends(current_user)
    ):
        return plugin_to_json(pipeline.registry.set_enabled(plugin_id, body.enabled, user))

    @app.get("/api/configs")
    def configs(
        plugin_id: Optional[str] = None, user: UserAccount = Depends(current_user)
    ):
        return [config_to_json(c) for c in pipeline.cart.list_configs(user, plugin_id)]

    @app.post("/api/configs")
    def save_config(body: ConfigBody, user: UserAccount = Depends(current_user)):
        return config_to_json(
            pipeline.cart.save_config(body.name, body.plugin_id, body.content, user)
        )

    @app.get("/api/configs/{config_id}")
    def get_config(config_id: str, user: UserAccount = Depends(current_user)):
        return config_to_json(pipeline.cart.load_config(config_id, user))

    # -- saved paths ------------------------------------------------------------------------

    @app.get("/api/paths")
    def saved_paths(user: UserAccount = Depends(current_user)):
        return [
            {"path_id": p.path_id, "path": p.path, "created_at": isoformat(p.created_at)}
            for p in pipeline.catalog.list_saved_paths(user)
        ]

    @app.post("/api/paths")
    def save_path(body: SavedPathBody, user: UserAccount = Depends(current_user)):
        saved = pipeline.catalog.save_path(body.path, user)
        return {"path_id": saved.path_id, "path": saved.path, "created_at": isoformat(saved.created_at)}

    # -- cart ---------------------------------------------------------------------------------

    @app.get("/api/cart")
    def cart(user: UserAccount = Depends(current_user)):
        return [cart_item_to_json(i) for i in pipeline.cart.list_cart_items(user)]

    @app.post("/api/cart")
    def add_cart_item(body: CartBody, user: UserAccount = Depends(current_user)):
        item = pipeline.cart.create_cart_item(
            plugin_id=body.plugin_id,
            user=user,
            selection_id=body.selection_id,
            image_ids=body.image_ids,
            config_id=body.config_id,
            aux_paths=body.aux_paths,
            policy_kind=body.policy_kind,
            policy_id=body.policy_id,
        )
        return cart_item_to_json(item)

    @app.get("/api/cart/{item_id}")
    def get_cart_item(item_id: str, user: UserAccount = Depends(current_user)):
        return cart_item_to_json(pipeline.cart.load_cart_item(item_id, user))

    # -- jobs / nodes / policies ------------------------------------------------------------------

    @app.post("/api/jobs")
    def submit_job(body: SubmitBody, user: UserAccount = Depends(current_user)):
        job = pipeline.submit_cart_item(
            body.cart_item_id, user, policy_ref=body.policy, static_ref=body.static
        )
        return job_to_json(job)

    @app.get("/api/jobs")
    def jobs(
        user: UserAccount = Depends(current_user),
        state: Optional[str] = None,
        owner: Optional[str] = None,
    ):
        return [job_to_json(j) for j in pipeline.scheduler.list_jobs(owner=owner, state=state)]

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: int, user: UserAccount = Depends(current_user)):
        return job_to_json(pipeline.scheduler.get_job(job_id))

    @app.post("/api/jobs/{job_id}/cancel")
    def cancel_job(job_id: int, user: UserAccount = Depends(current_user)):
        return job_to_json(pipeline.scheduler.cancel_job(job_id, user))

    @app.get("/api/nodes")
    def nodes(user: UserAccount = Depends(current_user)):
        load = pipeline.scheduler.node_load()
        return [
            {
                "name": node.name,
                "slots": node.slots,
                "attributes": node.attributes,
                "running": load.get(node.name, 0),
            }
            for node in pipeline.scheduler.nodes
        ]

    @app.get("/api/policies")
    def policies(user: UserAccount = Depends(current_user)):
        dynamic = [
            {
                "kind": "dynamic",
                "policy_id": p.policy_id,
                "label": p.label,
                "criteria": [
                    {"attribute": c.attribute, "op": c.op.value, "pattern": c.pattern}
                    for c in p.criteria
                ],
            }
            for p in pipeline.policies.list_policies()
        ]
        static = [
            {
                "kind": "static",
                "policy_id": s.selection_id,
                "label": s.label,
                "node_names": s.node_names,
            }
            for s in pipeline.policies.list_statics()
        ]
        return dynamic + static

    @app.post("/api/policies")
    def create_policy(body: PolicyBody, user: UserAccount = Depends(current_user)):
        if body.kind == "dynamic":
            criteria = []
            for c in body.criteria or []:
                try:
                    op = MatchOp(c.op)
                except ValueError:
                    raise errors.MalformedBody(f"op must be MATCH or NOMATCH, not {c.op!r}")
                criteria.append(PolicyCriterion(attribute=c.attribute, op=op, pattern=c.pattern))
            policy = pipeline.policies.create_policy(body.label, criteria)
            return {"kind": "dynamic", "policy_id": policy.policy_id, "label": policy.label}
        if body.kind == "static":
            if not body.node_names:
                raise errors.MalformedBody("static selection needs node_names")
            static = pipeline.policies.create_static(body.label, body.node_names)
            return {"kind": "static", "policy_id": static.selection_id, "label": static.label}
        raise errors.MalformedBody(f"kind must be 'dynamic' or 'static', not {body.kind!r}")

    # -- permissions --------------------------------------------------------------------------------

    @app.post("/api/chmod")
    def chmod(body: ChmodBody, user: UserAccount = Depends(current_user)):
        ownership = change_mode(
            pipeline.db, user, body.object_type, body.object_id, PermissionMode.from_string(body.mode)
        )
        return {
            "object_type": body.object_type,
            "object_id": body.object_id,
            "owner": ownership.owner,
            "group": ownership.group,
            "mode": ownership.mode.to_string(),
        }

    @app.post("/api/chown")
    def chown(body: ChownBody, user: UserAccount = Depends(current_user)):
        ownership = change_owner_group(
            pipeline.db,
            pipeline.accounts,
            user,
            body.object_type,
            body.object_id,
            new_owner=body.owner,
            new_group=body.group,
        )
        return {
            "object_type": body.object_type,
            "object_id": body.object_id,
            "owner": ownership.owner,
            "group": ownership.group,
            "mode": ownership.mode.to_string(),
        }

    # -- users ---------------------------------------------------------------------------------------

    @app.get("/api/users")
    def users(user: UserAccount = Depends(current_user)):
        if not user.is_admin:
            raise errors.PermissionDenied("user listing requires an admin")
        return [
            {"user_id": u.user_id, "login": u.login, "is_admin": u.is_admin}
            for u in pipeline.accounts.list_users()
        ]

    @app.post("/api/users")
    def create_user(body: UserBody, user: UserAccount = Depends(current_user)):
        if not user.is_admin:
            raise errors.PermissionDenied("user creation requires an admin")
        created = pipeline.accounts.create_user(
            body.login, body.password, is_admin=body.is_admin, extra_groups=body.groups
        )
        return {"user_id": created.user_id, "login": created.login, "is_admin": created.is_admin}

    # -- event stream -----------------------------------------------------------------------------------

    @app.get("/api/events")
    def events(
        user: UserAccount = Depends(current_user),
        from_seq: int = QueryParam(default=0),
        owner: Optional[str] = None,
        job_id: Optional[int] = None,
        status: Optional[str] = None,
    ):
        sub = pipeline.bus.subscribe(from_seq=from_seq, owner=owner, job_id=job_id, status=status)

        def stream() -> Iterator[str]:
            try:
                while True:
                    event = sub.get(timeout=0.5)
                    if event is None:
                        yield ": keep-alive\n\n"
                        continue
                    yield f"event: job\ndata: {json.dumps(event_to_json(event))}\n\n"
            finally:
                sub.close()

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app


def main() -> None:
    """``youpi-server``: run the HTTP service configured from the environment."""
    import uvicorn

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    config = PipelineConfig.from_env()
    pipeline = Pipeline(config)
    pipeline.scheduler.start()
    host, _, port = config.bind_addr.partition(":")
    app = create_app(pipeline)
    try:
        uvicorn.run(app, host=host or "127.0.0.1", port=int(port or "8000"), log_level="warning")
    finally:
        pipeline.close()


if __name__ == "__main__":
    main()
