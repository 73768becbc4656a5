"""Loopback HTTP servers for the harness: mock MDM and webhook receiver."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlparse


class _Quiet(BaseHTTPRequestHandler):
    def log_message(self, fmt, *args):
        pass


class MockMdmServer:
    """Paginated /managedDevices listing with scripted failures.

    Device objects use the inventory API schema: id, osVersion,
    complianceState, lostModeState, jailBroken, certificate.
    """

    def __init__(self, token: str = "mdm-token", page_size: int = 2):
        self.token = token
        self.page_size = page_size
        self._lock = threading.Lock()
        self._devices: dict[str, dict] = {}
        self._fail_next = 0
        self.request_count = 0

        mock = self

        class Handler(_Quiet):
            def do_GET(self):
                mock._handle(self)

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self._server.server_port}"

    def set_device(self, device: dict) -> None:
        with self._lock:
            self._devices[device["id"]] = device

    def remove_device(self, device_id: str) -> None:
        with self._lock:
            self._devices.pop(device_id, None)

    def fail_next(self, n: int) -> None:
        with self._lock:
            self._fail_next = n

    def _handle(self, handler: BaseHTTPRequestHandler) -> None:
        with self._lock:
            self.request_count += 1
            if self._fail_next > 0:
                self._fail_next -= 1
                handler.send_response(500)
                handler.end_headers()
                return
            devices = list(self._devices.values())
        if handler.headers.get("Authorization") != f"Bearer {self.token}":
            handler.send_response(401)
            handler.end_headers()
            return
        parsed = urlparse(handler.path)
        if parsed.path != "/managedDevices":
            handler.send_response(404)
            handler.end_headers()
            return
        page = int(parse_qs(parsed.query).get("page", ["0"])[0])
        start = page * self.page_size
        chunk = devices[start : start + self.page_size]
        has_more = start + self.page_size < len(devices)
        body = {
            "devices": chunk,
            "next": f"/managedDevices?page={page + 1}" if has_more else None,
        }
        data = json.dumps(body).encode()
        handler.send_response(200)
        handler.send_header("Content-Type", "application/json")
        handler.send_header("Content-Length", str(len(data)))
        handler.end_headers()
        handler.wfile.write(data)

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class WebhookReceiver:
    """Collects webhook POSTs; can refuse the first N requests."""

    def __init__(self):
        self._lock = threading.Lock()
        self.received: list[dict] = []
        self._fail_first = 0

        recv = self

        class Handler(_Quiet):
            def do_POST(self):
                recv._handle(self)

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self._server.server_port}/hook"

    def fail_first(self, n: int) -> None:
        with self._lock:
            self._fail_first = n

    def _handle(self, handler: BaseHTTPRequestHandler) -> None:
        length = int(handler.headers.get("Content-Length", "0"))
        body = handler.rfile.read(length)
        with self._lock:
            if self._fail_first > 0:
                self._fail_first -= 1
                handler.send_response(503)
                handler.end_headers()
                return
            try:
                self.received.append(json.loads(body))
            except json.JSONDecodeError:
                handler.send_response(400)
                handler.end_headers()
                return
        handler.send_response(200)
        handler.end_headers()

    def snapshot(self) -> list[dict]:
        with self._lock:
            return list(self.received)

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
