"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines on stdout.
"""

import itertools
import json
import random
import re
import string
import subprocess
import sys
import time
from contextlib import contextmanager

import pytest
from fastapi.testclient import TestClient

from helpers import ServerProc, write_fits_dir
from youpi.app import Pipeline, PipelineConfig
from youpi.authz import Action, PermissionMode, UserAccount, check_access
from youpi.cluster import (
    MatchOp,
    NodeSpec,
    PolicyCriterion,
    RequirementsPolicy,
    evaluate_policy,
    generate_submission_file,
    parse_submission_file,
    render_requirements,
)
from youpi.service import create_app

SELECTION_NAME = "CFHTLS-T0006-W3_Scamp"
FIG1_COUNT = 1450


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE FAIL: {name}")
        raise
    print(f"\nACCEPTANCE PASS: {name}")


def drive_until(pipeline, predicate, timeout=60.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        pipeline.scheduler.tick()
        if predicate():
            return
        time.sleep(0.02)
    raise AssertionError("condition not reached in time")


@pytest.fixture(scope="module")
def fig1(tmp_path_factory):
    """Criterion-1 flow, shared with the idempotence criterion."""
    tmp = tmp_path_factory.mktemp("fig1")
    started = time.monotonic()
    data_dir = tmp / "fits"
    write_fits_dir(data_dir, FIG1_COUNT, run_id="08BW3", filter="i.MP9702",
                   object="CFHTLS-W3")
    config = PipelineConfig(
        db_path=str(tmp / "fig1.db"),
        data_dir=str(tmp / "fig1-data"),
        notify_sink=str(tmp / "notify.log"),
        admin_password="adminpw",
    )
    pipeline = Pipeline(config)
    client = TestClient(create_app(pipeline), raise_server_exceptions=False)
    resp = client.post("/api/auth", json={"login": "admin", "password": "adminpw"})
    headers = {"Authorization": f"Bearer {resp.json()['token']}"}

    submit = client.post("/api/ingest", json={
        "paths": [str(data_dir)], "instrument": "MEGACAM",
    }, headers=headers)
    assert submit.status_code == 200, submit.text
    job_id = submit.json()["job_id"]
    ingestion_id = submit.json()["ingestion_id"]
    drive_until(
        pipeline,
        lambda: client.get(f"/api/jobs/{job_id}", headers=headers).json()["state"]
        in ("COMPLETED", "FAILED"),
        timeout=110,
    )
    report = client.get(f"/api/ingest/{ingestion_id}", headers=headers).json()

    images = client.get("/api/images", headers=headers).json()
    saved = client.post("/api/selections", json={
        "name": SELECTION_NAME, "image_ids": [r["image_id"] for r in images],
    }, headers=headers)
    assert saved.status_code == 200, saved.text
    queried = client.get("/api/images", params={"in_selection": SELECTION_NAME},
                         headers=headers).json()
    elapsed = time.monotonic() - started
    state = {
        "pipeline": pipeline,
        "client": client,
        "headers": headers,
        "data_dir": data_dir,
        "first_report": report,
        "selection_count": len(queried),
        "elapsed": elapsed,
    }
    yield state
    pipeline.close()


def test_criterion_1_fig1_fixture_1450_images(fig1):
    with criterion("Fig. 1 fixture: 1450 ingested images retrieved via the saved selection"):
        assert fig1["first_report"]["ingested"] == FIG1_COUNT
        assert fig1["first_report"]["failed"] == []
        assert fig1["selection_count"] == FIG1_COUNT  # tolerance 0
        assert fig1["elapsed"] < 120, f"took {fig1['elapsed']:.1f}s"


def test_criterion_2_ingestion_idempotence(fig1):
    with criterion("Ingestion idempotence: re-run reports ingested=0, skipped=1450"):
        pipeline, client, headers = fig1["pipeline"], fig1["client"], fig1["headers"]
        submit = client.post("/api/ingest", json={
            "paths": [str(fig1["data_dir"])], "instrument": "MEGACAM",
        }, headers=headers)
        job_id = submit.json()["job_id"]
        drive_until(
            pipeline,
            lambda: client.get(f"/api/jobs/{job_id}", headers=headers).json()["state"]
            in ("COMPLETED", "FAILED"),
            timeout=110,
        )
        report = client.get(f"/api/ingest/{submit.json()['ingestion_id']}",
                            headers=headers).json()
        assert report["ingested"] == 0
        assert report["skipped_duplicates"] == FIG1_COUNT


def test_criterion_3_permission_truth_table():
    with criterion("Permission oracle: 384/384 agreement with the Unix truth table"):
        owner = UserAccount("u-o", "o", "", groups={"g"})
        member = UserAccount("u-m", "m", "", groups={"g"})
        outsider = UserAccount("u-x", "x", "", groups={"h"})
        relations = [("owner", owner, 5), ("group", member, 3), ("other", outsider, 1)]

        class Obj:
            def __init__(self, mode):
                self.owner = "u-o"
                self.group = "g"
                self.mode = mode

        agreements = 0
        for bits, (name, user, read_shift), action in itertools.product(
            range(64), relations, (Action.READ, Action.WRITE)
        ):
            mode = PermissionMode(
                owner_r=bool(bits & 0b100000), owner_w=bool(bits & 0b010000),
                group_r=bool(bits & 0b001000), group_w=bool(bits & 0b000100),
                other_r=bool(bits & 0b000010), other_w=bool(bits & 0b000001),
            )
            shift = read_shift if action is Action.READ else read_shift - 1
            expected = bool(bits & (1 << shift))
            assert check_access(user, Obj(mode), action) == expected, (bits, name, action)
            agreements += 1
        assert agreements == 384


def test_criterion_4_policy_oracle_1000_cases():
    with criterion("Policy oracle: 1000 randomized evaluations match brute force"):
        rng = random.Random(20091002)
        patterns = [
            "^node0[13]$", "8192", "^(8192|16384)$", "LINUX", "X86", "0[24]$",
            "node", "^n.*[0-9]$", "r[12]", "^$", "ARM", "OSX|LINUX", "[0-9]{5}",
        ]
        attributes = ["Name", "Memory", "OpSys", "Arch", "Rack"]
        for case in range(1000):
            inventory = []
            for i in range(rng.randint(1, 16)):
                attrs = {
                    "Memory": rng.choice(["4096", "8192", "16384", "32768"]),
                    "OpSys": rng.choice(["LINUX", "OSX"]),
                    "Arch": rng.choice(["X86_64", "ARM64"]),
                }
                if rng.random() < 0.5:
                    attrs["Rack"] = rng.choice(["r1", "r2", "r3"])
                inventory.append(NodeSpec(f"node{i + 1:02d}", 1, attrs))
            policy = RequirementsPolicy(
                policy_id="p", label=f"case-{case}",
                criteria=[
                    PolicyCriterion(
                        rng.choice(attributes),
                        rng.choice([MatchOp.MATCH, MatchOp.NOMATCH]),
                        rng.choice(patterns),
                    )
                    for _ in range(rng.randint(0, 4))
                ],
            )
            # independent brute force: compile each regex, test every node
            expected = []
            for node in inventory:
                ok = True
                for c in policy.criteria:
                    value = node.attributes.get(c.attribute)
                    hit = value is not None and re.compile(c.pattern).search(value) is not None
                    if (c.op is MatchOp.MATCH) != hit:
                        ok = False
                        break
                if ok:
                    expected.append(node.name)
            assert evaluate_policy(policy, inventory) == sorted(expected), case


def test_criterion_5_submission_file_round_trip(tmp_path):
    with criterion("Submission files: 500 fuzzed round-trips + 3 golden byte-compares"):
        rng = random.Random(5150)
        token_chars = string.ascii_letters + string.digits + "/._-"
        env_value_chars = token_chars + "= @()"

        def token(minlen=1, maxlen=12):
            return "".join(rng.choice(token_chars) for _ in range(rng.randint(minlen, maxlen)))

        for case in range(500):
            argv = ["/" + token()] + [token() for _ in range(rng.randint(0, 5))]
            env = {}
            for _ in range(rng.randint(0, 5)):
                key = "".join(rng.choice(string.ascii_uppercase + "_")
                              for _ in range(rng.randint(1, 10)))
                env[key] = "".join(rng.choice(env_value_chars)
                                   for _ in range(rng.randint(0, 12)))
            if rng.random() < 0.5:
                names = [f"node{n:02d}" for n in range(1, rng.randint(2, 5))]
                expr = render_requirements(names)
            else:
                expr = ""
            workdir = "/" + token()
            job_id = rng.randint(1, 10**6)

            text = generate_submission_file(job_id, argv, env, expr, workdir)
            expected = {"universe": "vanilla", "executable": argv[0]}
            if len(argv) > 1:
                expected["arguments"] = " ".join(argv[1:])
            if env:
                expected["environment"] = ";".join(f"{k}={v}" for k, v in env.items())
            if expr:
                expected["requirements"] = expr
            expected.update({
                "initialdir": workdir,
                "output": f"job.{job_id}.out",
                "error": f"job.{job_id}.err",
                "log": f"job.{job_id}.log",
            })
            parsed = parse_submission_file(text)
            assert parsed == expected, case
            assert list(parsed) == list(expected), case  # order preserved too

        from pathlib import Path

        golden = Path(__file__).parent / "golden"
        assert generate_submission_file(
            1, ["/bin/mock"], {}, "", "/work/job.1"
        ) == (golden / "minimal.sub").read_text()
        assert generate_submission_file(
            42,
            ["/opt/tools/scamp", "-c", "/work/job.42/scamp.conf",
             "@/work/job.42/images.list"],
            {"YOUPI_AUX_AHEAD_DIR": "/data/ahead", "MODE": "fast"},
            '(Name == "node01") || (Name == "node02")',
            "/work/job.42",
        ) == (golden / "full.sub").read_text()
        assert generate_submission_file(
            7,
            ["/usr/bin/swarp", "-c", "/w/swarp.conf", "@/w/images.list",
             "-o", "/w/output"],
            {},
            '(Name == "node03")',
            "/w",
        ) == (golden / "single_node.sub").read_text()


THREE_NODES = "node01 2\nnode02 2\nnode03 2\n"


@pytest.fixture(scope="module")
def simulation(tmp_path_factory):
    """10 one-second mock jobs on 3 nodes x 2 slots, shared by criteria 6 and 8."""
    tmp = tmp_path_factory.mktemp("sim")
    nodes_file = tmp / "nodes.txt"
    nodes_file.write_text(THREE_NODES)
    config = PipelineConfig(
        db_path=str(tmp / "sim.db"),
        data_dir=str(tmp / "sim-data"),
        notify_sink=str(tmp / "notify.log"),
        admin_password="adminpw",
        nodes_file=str(nodes_file),
        tick_ms=50,
    )
    pipeline = Pipeline(config)
    admin = pipeline.accounts.find_by_login("admin")

    data = tmp / "fits"
    write_fits_dir(data, 3)
    from youpi.instruments import get_profile

    pipeline.ingestor.run_ingestion([str(data)], get_profile("MEGACAM"), admin)
    from youpi.catalog import Query

    images = pipeline.catalog.query_images(Query(), admin)
    selection = pipeline.catalog.save_selection("sim", [r.image_id for r in images], admin)
    config_file = pipeline.cart.save_config(
        "one-second", "swarp", "DURATION_MS 1000\nEXIT_CODE 0\n", admin
    )
    item = pipeline.cart.create_cart_item(
        "swarp", admin, selection_id=selection.selection_id,
        config_id=config_file.config_id,
    )

    subscriber_a = pipeline.bus.subscribe(from_seq=0)
    subscriber_b = pipeline.bus.subscribe(from_seq=0)

    started = time.monotonic()
    jobs = [pipeline.submit_cart_item(item.item_id, admin) for _ in range(10)]
    pipeline.scheduler.start()
    assert pipeline.scheduler.wait_all_terminal(timeout=29), "simulation overran 30s"
    elapsed = time.monotonic() - started
    pipeline.scheduler.stop()

    def drain(sub, expected_count):
        out = []
        deadline = time.monotonic() + 10
        while len(out) < expected_count and time.monotonic() < deadline:
            event = sub.get(timeout=0.2)
            if event is not None:
                out.append(event)
        return out

    job_ids = [j.job_id for j in jobs]
    events_a = [e for e in drain(subscriber_a, 30) if e.job_id in job_ids]
    events_b = [e for e in drain(subscriber_b, 30) if e.job_id in job_ids]
    subscriber_a.close()
    subscriber_b.close()

    state = {
        "pipeline": pipeline,
        "jobs": job_ids,
        "elapsed": elapsed,
        "events_a": events_a,
        "events_b": events_b,
        "nodes": {n.name: n.slots for n in pipeline.scheduler.nodes},
    }
    yield state
    pipeline.close()


def test_criterion_6_scheduler_simulation(simulation):
    with criterion("Scheduler: 10 jobs on 3x2 slots, safe, fair, all terminal, <30s"):
        pipeline = simulation["pipeline"]
        job_ids = simulation["jobs"]
        jobs = [pipeline.scheduler.get_job(j) for j in job_ids]

        assert all(j.state.value == "COMPLETED" for j in jobs)
        assert simulation["elapsed"] < 30

        # requirement safety: no job may run on a node its expression excludes
        from youpi.cluster import requirements_allows

        for job in jobs:
            assert job.assigned_node is not None
            assert requirements_allows(job.requirements_expr, job.assigned_node)

        # slot safety replayed from the serialized event history
        events = simulation["events_a"]
        running_on = {}
        max_concurrent = 0
        for event in events:
            if event.status == "RUNNING":
                node = event.remote_host
                running_on[node] = running_on.get(node, 0) + 1
                assert running_on[node] <= simulation["nodes"][node], (
                    f"slot violation on {node}"
                )
            elif event.status in ("COMPLETED", "FAILED", "CANCELLED"):
                node = event.remote_host
                if node in running_on:
                    running_on[node] -= 1
            max_concurrent = max(max_concurrent, sum(running_on.values()))
        assert max_concurrent <= 6

        # FIFO fairness: identical requirements, so start order == queue order
        start_order = [e.job_id for e in events if e.status == "RUNNING"]
        assert start_order == sorted(start_order)
        assert start_order == job_ids


def test_criterion_8_event_stream_consistency(simulation):
    with criterion("Event stream: two subscribers see identical gap-free sequences"):
        events_a = simulation["events_a"]
        events_b = simulation["events_b"]
        assert len(events_a) == len(events_b) == 30  # 10 jobs x 3 transitions
        seq_a = [(e.seq, e.job_id, e.status) for e in events_a]
        seq_b = [(e.seq, e.job_id, e.status) for e in events_b]
        assert seq_a == seq_b
        seqs = [s for s, _, _ in seq_a]
        assert seqs == list(range(seqs[0], seqs[0] + len(seqs)))


CLI = [sys.executable, "-m", "youpi.cli"]


def test_criterion_7_end_to_end_via_cli(tmp_path):
    with criterion("End-to-end pipeline, CLI only: ingest to COMPLETED on the matching node"):
        started = time.monotonic()
        server = ServerProc(tmp_path, nodes_text="node01 2\nnode02 2\n", tick_ms=100)
        try:
            import os

            env = dict(os.environ)
            env["YOUPI_URL"] = server.url

            def cli(*args, check=True):
                result = subprocess.run(CLI + list(args), env=env,
                                        capture_output=True, text=True, timeout=60)
                if check:
                    assert result.returncode == 0, (args, result.stderr)
                return result

            token = cli("users", "token", "--login", "admin",
                        "--password", "adminpw").stdout.strip()
            env["YOUPI_TOKEN"] = token

            data = tmp_path / "e2e-fits"
            write_fits_dir(data, 5)
            ingest = cli("ingest", "--path", str(data), "--instrument", "MEGACAM",
                         "--wait")
            assert "ingested=5" in ingest.stdout

            images = json.loads(cli("images", "--json").stdout)
            assert len(images) == 5
            id_args = [arg for r in images for arg in ("--image-id", r["image_id"])]
            cli("selections", "save", "--name", "e2e-sel", *id_args)

            tagged = cli("tags", "apply", "--tag", "e2e-ok", "--selection", "e2e-sel")
            assert "affected 5" in tagged.stdout

            ahead_dir = tmp_path / "ahead"
            ahead_dir.mkdir()
            cli("nodes", "policy-add", "--label", "only-node02",
                "--criterion", "Name MATCH ^node02$")
            item = json.loads(cli(
                "cart", "add", "--plugin", "scamp", "--selection", "e2e-sel",
                "--config", "default", "--aux", f"ahead_dir={ahead_dir}", "--json",
            ).stdout)

            job = json.loads(cli("submit", "--cart-item", item["item_id"],
                                 "--policy", "only-node02", "--json").stdout)
            assert job["requirements_expr"] == '(Name == "node02")'

            watch = cli("watch", "--from", "0", "--job", str(job["job_id"]),
                        "--count", "3")
            rows = [line.split() for line in watch.stdout.splitlines()]
            assert [r[2] for r in rows] == ["QUEUED", "RUNNING", "COMPLETED"]
            assert rows[1][3] == "node02"  # ran on the matching node
            assert rows[2][3] == "node02"

            final = json.loads(cli("jobs", "--job", str(job["job_id"]), "--json").stdout)
            assert final["state"] == "COMPLETED"
            assert final["assigned_node"] == "node02"
            assert f"YOUPI_AUX_AHEAD_DIR={ahead_dir}" in final["submission_text"]

            elapsed = time.monotonic() - started
            assert elapsed < 60, f"took {elapsed:.1f}s"
        finally:
            server.stop()
