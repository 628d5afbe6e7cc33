"""Shared test utilities: synthetic FITS files and a live-server harness."""

from __future__ import annotations

import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import requests

from youpi.fitsio import FitsCard, serialize_header


def make_fits_bytes(
    run_id="09AQ05",
    filter="g.MP9401",
    object="W3-field",
    date_obs="2009-05-13T09:18:29",
    exptime=120.5,
    serial=0,
    extra_cards=None,
    keyword_overrides=None,
):
    """Header-only FITS image; ``serial`` makes file content unique."""
    keywords = {
        "RUNID": run_id,
        "FILTER": filter,
        "OBJECT": object,
        "DATE-OBS": date_obs,
        "EXPTIME": exptime,
    }
    if keyword_overrides:
        keywords = keyword_overrides
    cards = [FitsCard("SIMPLE", True), FitsCard("BITPIX", 8), FitsCard("NAXIS", 0)]
    for keyword, value in keywords.items():
        if value is not None:
            cards.append(FitsCard(keyword, value))
    cards.append(FitsCard("SERIAL", serial))
    for card in extra_cards or []:
        cards.append(card)
    return serialize_header(cards)


def write_fits_dir(dirpath, count, prefix="img", start_serial=0, **kw):
    """Write ``count`` distinct synthetic FITS files; returns their paths."""
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    width = max(4, len(str(count)))
    for i in range(count):
        path = root / f"{prefix}{i:0{width}d}.fits"
        path.write_bytes(make_fits_bytes(serial=start_serial + i, **kw))
        paths.append(path)
    return paths


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class ServerProc:
    """A real youpi-server subprocess for CLI / SSE / crash tests."""

    def __init__(
        self,
        tmp_path,
        nodes_text=None,
        tick_ms=100,
        admin_password="adminpw",
        db_path=None,
        env_extra=None,
    ):
        self.tmp_path = Path(tmp_path)
        self.port = free_port()
        self.url = f"http://127.0.0.1:{self.port}"
        self.db_path = str(db_path or self.tmp_path / "server.db")
        self.notify_path = self.tmp_path / "server-notify.log"
        env = dict(os.environ)
        env.update(
            {
                "YOUPI_DB_PATH": self.db_path,
                "YOUPI_BIND_ADDR": f"127.0.0.1:{self.port}",
                "YOUPI_TICK_MS": str(tick_ms),
                "YOUPI_NOTIFY_SINK": str(self.notify_path),
                "YOUPI_ADMIN_PASSWORD": admin_password,
            }
        )
        if nodes_text is not None:
            nodes_file = self.tmp_path / "server-nodes.txt"
            nodes_file.write_text(nodes_text)
            env["YOUPI_NODES_FILE"] = str(nodes_file)
        env.update(env_extra or {})
        self.env = env
        self.admin_password = admin_password
        self.proc = None
        self.start()

    def start(self):
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "youpi.service"],
            env=self.env,
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
        )
        deadline = time.monotonic() + 30
        while time.monotonic() < deadline:
            try:
                if requests.get(self.url + "/api/health", timeout=1).status_code == 200:
                    return
            except requests.RequestException:
                pass
            if self.proc.poll() is not None:
                raise RuntimeError(f"server died on startup (rc={self.proc.returncode})")
            time.sleep(0.05)
        raise RuntimeError("server did not become healthy in time")

    def token(self, login="admin", password=None):
        resp = requests.post(
            self.url + "/api/auth",
            json={"login": login, "password": password or self.admin_password},
            timeout=10,
        )
        resp.raise_for_status()
        return resp.json()["token"]

    def kill(self):
        if self.proc and self.proc.poll() is None:
            self.proc.send_signal(signal.SIGKILL)
            self.proc.wait(timeout=10)

    def stop(self):
        if self.proc and self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait(timeout=10)
