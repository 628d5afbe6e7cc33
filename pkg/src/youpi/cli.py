"""Administrative command-line client for a running youpi service.

Pure API client: every subcommand maps onto an HTTP endpoint, nothing talks
to the database directly. Exit codes: 0 success, 1 domain error (the ApiError
code goes to stderr), 2 usage error. ``--json`` prints the raw response body.
"""

from __future__ import annotations

import json
import sys
import time

import click
import requests


class ApiFailure(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class Client:
    def __init__(self, url: str, token: str | None):
        self.url = url.rstrip("/")
        self.token = token

    def request(self, method: str, path: str, body=None, params=None, stream=False):
        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        resp = requests.request(
            method,
            self.url + path,
            json=body,
            params=params,
            headers=headers,
            stream=stream,
            timeout=None if stream else 60,
        )
        if resp.status_code >= 400:
            try:
                payload = resp.json()
                raise ApiFailure(payload.get("code", f"HTTP_{resp.status_code}"),
                                 payload.get("message", resp.reason))
            except ValueError:
                raise ApiFailure(f"HTTP_{resp.status_code}", resp.reason)
        return resp

    def get(self, path, params=None, stream=False):
        return self.request("GET", path, params=params, stream=stream)

    def post(self, path, body=None):
        return self.request("POST", path, body=body)

    def delete(self, path):
        return self.request("DELETE", path)


json_option = click.option(
    "--json", "as_json", is_flag=True, help="print the raw API response body"
)


def emit(resp, as_json: bool, human=None):
    if as_json:
        sys.stdout.buffer.write(resp.content)
        sys.stdout.buffer.flush()
        return
    if human is not None:
        human(resp.json())


@click.group()
@click.option("--url", envvar="YOUPI_URL", default="http://127.0.0.1:8000",
              show_default=True, help="service base URL")
@click.option("--token", envvar="YOUPI_TOKEN", default=None, help="session token")
@click.pass_context
def cli(ctx, url, token):
    """Command-line client for the youpi pipeline service."""
    ctx.obj = Client(url, token)


# -- ingest ----------------------------------------------------------------------

@cli.command()
@click.option("--path", "paths", multiple=True, required=True, help="data path to scan")
@click.option("--instrument", required=True, help="instrument profile (MEGACAM/WIRCAM/VIRCAM)")
@click.option("--recursive/--no-recursive", default=False)
@click.option("--wait", is_flag=True, help="block until the ingestion job finishes")
@json_option
@click.pass_obj
def ingest(client: Client, paths, instrument, recursive, wait, as_json):
    """Submit an ingestion job for one or more data paths."""
    resp = client.post(
        "/api/ingest",
        {"paths": list(paths), "instrument": instrument, "recursive": recursive},
    )
    submitted = resp.json()
    if not wait:
        emit(resp, as_json, lambda d: click.echo(
            f"job {d['job_id']} queued, ingestion {d['ingestion_id']}"))
        return
    job_id = submitted["job_id"]
    while True:
        job = client.get(f"/api/jobs/{job_id}").json()
        if job["state"] in ("COMPLETED", "FAILED", "CANCELLED"):
            break
        time.sleep(0.2)
    report_resp = client.get(f"/api/ingest/{submitted['ingestion_id']}")
    if as_json:
        emit(report_resp, True)
        return
    report = report_resp.json()
    click.echo(
        f"job {job_id} {job['state']}: ingested={report['ingested']} "
        f"skipped={report['skipped_duplicates']} failed={len(report['failed'])}"
    )
    if job["state"] != "COMPLETED":
        raise ApiFailure("JOB_" + job["state"], f"ingestion job {job_id} ended {job['state']}")


# -- images -----------------------------------------------------------------------

@cli.command()
@click.option("--run-id")
@click.option("--filter", "filter_")
@click.option("--instrument")
@click.option("--grade")
@click.option("--tag")
@click.option("--glob", "filename_glob")
@click.option("--ingestion", "ingestion_id")
@click.option("--from", "date_from", help="date_obs lower bound (ISO-8601)")
@click.option("--to", "date_to", help="date_obs upper bound (ISO-8601)")
@click.option("--selection", "in_selection", help="restrict to a saved selection name")
@json_option
@click.pass_obj
def images(client: Client, run_id, filter_, instrument, grade, tag, filename_glob,
           ingestion_id, date_from, date_to, in_selection, as_json):
    """Query the image catalog (all criteria combine as AND)."""
    params = {
        "run_id": run_id,
        "filter": filter_,
        "instrument": instrument,
        "grade": grade,
        "tag": tag,
        "filename_glob": filename_glob,
        "ingestion_id": ingestion_id,
        "date_from": date_from,
        "date_to": date_to,
        "in_selection": in_selection,
    }
    params = {k: v for k, v in params.items() if v is not None}
    resp = client.get("/api/images", params=params)

    def human(records):
        for rec in records:
            click.echo(
                f"{rec['image_id']} {rec['filename']} run={rec['run_id'] or '-'} "
                f"filter={rec['filter'] or '-'} grade={rec['grade'] or '-'}"
            )
        click.echo(f"total {len(records)}")

    emit(resp, as_json, human)


# -- selections ----------------------------------------------------------------------

@cli.group()
def selections():
    """Manage saved selections."""


@selections.command("list")
@json_option
@click.pass_obj
def selections_list(client: Client, as_json):
    resp = client.get("/api/selections")
    emit(resp, as_json, lambda items: [
        click.echo(f"{s['selection_id']} {s['name']} count={s['count']}") for s in items
    ])


@selections.command("save")
@click.option("--name", required=True)
@click.option("--image-id", "image_ids", multiple=True)
@click.option("--stdin", "from_stdin", is_flag=True, help="read image ids from stdin")
@json_option
@click.pass_obj
def selections_save(client: Client, name, image_ids, from_stdin, as_json):
    ids = list(image_ids)
    if from_stdin:
        ids += [line.strip() for line in sys.stdin if line.strip()]
    resp = client.post("/api/selections", {"name": name, "image_ids": ids})
    emit(resp, as_json, lambda s: click.echo(f"{s['selection_id']} {s['name']} count={s['count']}"))


@selections.command("delete")
@click.option("--id", "selection_id", required=True)
@json_option
@click.pass_obj
def selections_delete(client: Client, selection_id, as_json):
    resp = client.delete(f"/api/selections/{selection_id}")
    emit(resp, as_json, lambda d: click.echo(f"deleted {d['deleted']}"))


@selections.command("merge")
@click.option("--target", required=True, help="name for the merged selection")
@click.option("--source", "sources", multiple=True, required=True, help="source selection id")
@json_option
@click.pass_obj
def selections_merge(client: Client, target, sources, as_json):
    resp = client.post("/api/selections/merge",
                       {"target_name": target, "source_ids": list(sources)})
    emit(resp, as_json, lambda s: click.echo(f"{s['selection_id']} {s['name']} count={s['count']}"))


@selections.command("import")
@click.option("--name", required=True)
@click.option("--file", "file_", required=True, type=click.Path(exists=True))
@json_option
@click.pass_obj
def selections_import(client: Client, name, file_, as_json):
    with open(file_, "r", encoding="utf-8") as fh:
        text = fh.read()
    resp = client.post("/api/selections/import", {"name": name, "text": text})
    emit(resp, as_json, lambda d: click.echo(
        f"{d['selection']['selection_id']} {d['selection']['name']} "
        f"resolved={d['report']['resolved']} unresolved={len(d['report']['unresolved'])} "
        f"mismatched={len(d['report']['mismatched'])}"
    ))


@selections.command("import-dir")
@click.option("--dir", "directory", required=True)
@json_option
@click.pass_obj
def selections_import_dir(client: Client, directory, as_json):
    resp = client.post("/api/selections/import-dir", {"dir": directory})

    def human(items):
        for entry in items:
            if "selection_id" in entry:
                click.echo(f"{entry['file']}: ok ({entry['selection_id']})")
            else:
                click.echo(f"{entry['file']}: {entry['error']}")

    emit(resp, as_json, human)


@selections.command("export")
@click.option("--id", "selection_id", required=True)
@click.pass_obj
def selections_export(client: Client, selection_id):
    resp = client.get(f"/api/selections/{selection_id}/export")
    sys.stdout.write(resp.text)


# -- tags -------------------------------------------------------------------------------

@cli.group()
def tags():
    """List and apply tags."""


@tags.command("list")
@json_option
@click.pass_obj
def tags_list(client: Client, as_json):
    resp = client.get("/api/tags")
    emit(resp, as_json, lambda items: [
        click.echo(f"{t['name']} owner={t['owner']}") for t in items
    ])


@tags.command("apply")
@click.option("--tag", required=True)
@click.option("--image-id", "image_ids", multiple=True)
@click.option("--selection-id")
@click.option("--selection", "selection_name")
@click.option("--unmark", is_flag=True, help="remove the tag instead of adding it")
@json_option
@click.pass_obj
def tags_apply(client: Client, tag, image_ids, selection_id, selection_name, unmark, as_json):
    body = {"tag": tag, "mark": not unmark}
    if image_ids:
        body["image_ids"] = list(image_ids)
    if selection_id:
        body["selection_id"] = selection_id
    if selection_name:
        body["selection_name"] = selection_name
    resp = client.post("/api/tags/apply", body)
    emit(resp, as_json, lambda d: click.echo(f"affected {d['affected']}"))


# -- cart --------------------------------------------------------------------------------

@cli.group()
def cart():
    """Manage processing cart items."""


@cart.command("list")
@json_option
@click.pass_obj
def cart_list(client: Client, as_json):
    resp = client.get("/api/cart")
    emit(resp, as_json, lambda items: [
        click.echo(f"{i['item_id']} plugin={i['plugin_id']} config={i['config_id']}")
        for i in items
    ])


def _resolve_selection_id(client: Client, name: str) -> str:
    for entry in client.get("/api/selections").json():
        if entry["name"] == name:
            return entry["selection_id"]
    raise ApiFailure("UNKNOWN_SELECTION", f"no selection named {name!r}")


def _resolve_config_id(client: Client, plugin_id: str, name: str) -> str:
    for entry in client.get("/api/configs", params={"plugin_id": plugin_id}).json():
        if entry["name"] == name:
            return entry["config_id"]
    raise ApiFailure("UNKNOWN_CONFIG", f"no config named {name!r} for plugin {plugin_id}")


@cart.command("add")
@click.option("--plugin", required=True)
@click.option("--selection-id")
@click.option("--selection", "selection_name")
@click.option("--image-id", "image_ids", multiple=True)
@click.option("--config-id")
@click.option("--config", "config_name", help="config name (resolved for the plugin)")
@click.option("--aux", "aux", multiple=True, help="aux path as LABEL=/abs/path")
@click.option("--policy", help="dynamic policy label/id stored on the item")
@click.option("--static", "static_", help="static selection label/id stored on the item")
@json_option
@click.pass_obj
def cart_add(client: Client, plugin, selection_id, selection_name, image_ids,
             config_id, config_name, aux, policy, static_, as_json):
    if selection_name and not selection_id:
        selection_id = _resolve_selection_id(client, selection_name)
    if config_name and not config_id:
        config_id = _resolve_config_id(client, plugin, config_name)
    if not config_id:
        raise click.UsageError("one of --config-id / --config is required")
    aux_paths = {}
    for spec in aux:
        label, _, path = spec.partition("=")
        if not path:
            raise click.UsageError(f"bad --aux {spec!r}, expected LABEL=/abs/path")
        saved = client.post("/api/paths", {"path": path}).json()
        aux_paths[label] = saved["path_id"]
    body = {
        "plugin_id": plugin,
        "config_id": config_id,
        "aux_paths": aux_paths,
    }
    if selection_id:
        body["selection_id"] = selection_id
    if image_ids:
        body["image_ids"] = list(image_ids)
    if policy and static_:
        raise click.UsageError("--policy and --static are mutually exclusive")
    if policy:
        body["policy_kind"], body["policy_id"] = "policy", _policy_id(client, policy, "dynamic")
    if static_:
        body["policy_kind"], body["policy_id"] = "static", _policy_id(client, static_, "static")
    resp = client.post("/api/cart", body)
    emit(resp, as_json, lambda i: click.echo(f"{i['item_id']} plugin={i['plugin_id']}"))


@cart.command("show")
@click.option("--id", "item_id", required=True)
@json_option
@click.pass_obj
def cart_show(client: Client, item_id, as_json):
    resp = client.get(f"/api/cart/{item_id}")
    emit(resp, as_json, lambda i: click.echo(json.dumps(i, indent=2)))


# -- submission / jobs ------------------------------------------------------------------------

def _policy_id(client: Client, ref: str, kind: str) -> str:
    for entry in client.get("/api/policies").json():
        if entry["kind"] == kind and (entry["policy_id"] == ref or entry["label"] == ref):
            return entry["policy_id"]
    raise ApiFailure("UNKNOWN_POLICY", f"no {kind} policy {ref!r}")


@cli.command()
@click.option("--cart-item", required=True)
@click.option("--policy", help="dynamic policy label or id")
@click.option("--static", "static_", help="static selection label or id")
@json_option
@click.pass_obj
def submit(client: Client, cart_item, policy, static_, as_json):
    """Submit a cart item as a processing job."""
    body = {"cart_item_id": cart_item}
    if policy:
        body["policy"] = policy
    if static_:
        body["static"] = static_
    resp = client.post("/api/jobs", body)
    emit(resp, as_json, lambda j: click.echo(
        f"job {j['job_id']} {j['state']} requirements={j['requirements_expr'] or '-'}"))


@cli.command()
@click.option("--job", "job_id", type=int, help="show one job")
@click.option("--state", help="filter by state")
@click.option("--cancel", "cancel_id", type=int, help="cancel a job by id")
@json_option
@click.pass_obj
def jobs(client: Client, job_id, state, cancel_id, as_json):
    """List jobs, inspect one, or cancel one."""
    if cancel_id is not None:
        resp = client.post(f"/api/jobs/{cancel_id}/cancel")
        emit(resp, as_json, lambda j: click.echo(f"job {j['job_id']} {j['state']}"))
        return
    if job_id is not None:
        resp = client.get(f"/api/jobs/{job_id}")
        emit(resp, as_json, lambda j: click.echo(json.dumps(j, indent=2)))
        return
    params = {"state": state} if state else None
    resp = client.get("/api/jobs", params=params)

    def human(items):
        for j in items:
            click.echo(
                f"{j['job_id']} {j['kind']} {j['state']} node={j['assigned_node'] or '-'} "
                f"owner={j['owner']} {j['description']}"
            )

    emit(resp, as_json, human)


@cli.command()
@click.option("--from", "from_seq", type=int, default=0, show_default=True)
@click.option("--owner")
@click.option("--job", "job_id", type=int)
@click.option("--count", type=int, default=None,
              help="exit after printing this many events (default: run until interrupted)")
@click.pass_obj
def watch(client: Client, from_seq, owner, job_id, count):
    """Stream monitor events; one line per event."""
    params = {"from_seq": from_seq}
    if owner:
        params["owner"] = owner
    if job_id is not None:
        params["job_id"] = job_id
    resp = client.get("/api/events", params=params, stream=True)
    printed = 0
    data_lines: list[str] = []
    for raw in resp.iter_lines(decode_unicode=True):
        if raw is None:
            continue
        if raw.startswith("data:"):
            data_lines.append(raw[5:].strip())
            continue
        if raw == "" and data_lines:
            event = json.loads("\n".join(data_lines))
            data_lines = []
            click.echo(
                f"{event['seq']} {event['job_id']} {event['status']} "
                f"{event['remote_host']} {event['running_time']} {event['owner']}"
            )
            printed += 1
            if count is not None and printed >= count:
                resp.close()
                return


# -- nodes and policies -----------------------------------------------------------------------

@cli.group()
def nodes():
    """Cluster inventory and node-targeting policies."""


@nodes.command("list")
@json_option
@click.pass_obj
def nodes_list(client: Client, as_json):
    resp = client.get("/api/nodes")

    def human(items):
        for n in items:
            attrs = " ".join(f"{k}={v}" for k, v in sorted(n["attributes"].items()))
            click.echo(f"{n['name']} slots={n['slots']} running={n['running']} {attrs}")

    emit(resp, as_json, human)


@nodes.command("policies")
@json_option
@click.pass_obj
def nodes_policies(client: Client, as_json):
    resp = client.get("/api/policies")

    def human(items):
        for p in items:
            if p["kind"] == "dynamic":
                crit = "; ".join(
                    f"{c['attribute']} {c['op']} {c['pattern']}" for c in p["criteria"]
                )
                click.echo(f"dynamic {p['label']} [{crit}]")
            else:
                click.echo(f"static {p['label']} [{' '.join(p['node_names'])}]")

    emit(resp, as_json, human)


@nodes.command("policy-add")
@click.option("--label", required=True)
@click.option("--criterion", "criteria", multiple=True,
              help="'ATTRIBUTE MATCH|NOMATCH PATTERN' (repeatable)")
@json_option
@click.pass_obj
def nodes_policy_add(client: Client, label, criteria, as_json):
    parsed = []
    for spec in criteria:
        parts = spec.split(" ", 2)
        if len(parts) != 3:
            raise click.UsageError(f"bad --criterion {spec!r}")
        parsed.append({"attribute": parts[0], "op": parts[1], "pattern": parts[2]})
    resp = client.post("/api/policies",
                       {"kind": "dynamic", "label": label, "criteria": parsed})
    emit(resp, as_json, lambda p: click.echo(f"policy {p['label']} ({p['policy_id']})"))


@nodes.command("static-add")
@click.option("--label", required=True)
@click.option("--node", "node_names", multiple=True, required=True)
@json_option
@click.pass_obj
def nodes_static_add(client: Client, label, node_names, as_json):
    resp = client.post("/api/policies",
                       {"kind": "static", "label": label, "node_names": list(node_names)})
    emit(resp, as_json, lambda p: click.echo(f"static {p['label']} ({p['policy_id']})"))


# -- users ---------------------------------------------------------------------------------------

@cli.group()
def users():
    """Accounts and session tokens."""


@users.command("list")
@json_option
@click.pass_obj
def users_list(client: Client, as_json):
    resp = client.get("/api/users")
    emit(resp, as_json, lambda items: [
        click.echo(f"{u['login']} admin={u['is_admin']}") for u in items
    ])


@users.command("create")
@click.option("--login", required=True)
@click.option("--password", required=True)
@click.option("--admin", "is_admin", is_flag=True)
@click.option("--group", "groups", multiple=True)
@json_option
@click.pass_obj
def users_create(client: Client, login, password, is_admin, groups, as_json):
    resp = client.post("/api/users", {
        "login": login, "password": password, "is_admin": is_admin, "groups": list(groups),
    })
    emit(resp, as_json, lambda u: click.echo(f"{u['login']} ({u['user_id']})"))


@users.command("token")
@click.option("--login", required=True)
@click.option("--password", required=True)
@json_option
@click.pass_obj
def users_token(client: Client, login, password, as_json):
    """Obtain a session token (prints just the token without --json)."""
    resp = client.post("/api/auth", {"login": login, "password": password})
    emit(resp, as_json, lambda d: click.echo(d["token"]))


def main() -> None:
    try:
        cli.main(standalone_mode=True)
    except ApiFailure as exc:
        click.echo(f"{exc.code}: {exc.message}", err=True)
        sys.exit(1)
    except requests.RequestException as exc:
        click.echo(f"CONNECTION_ERROR: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
