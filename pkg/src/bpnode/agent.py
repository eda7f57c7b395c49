"""REST application agent: send, fetch and register over HTTP with JSON bodies.

Payloads travel base64-encoded. Errors are ``{"error": text}`` with a 4xx status.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .bundle import MAX_BUNDLE_SIZE, BundleFlags
from .errors import EIDError, NotFoundError
from .eid import parse_eid

log = logging.getLogger(__name__)

DEFAULT_AGENT_PORT = 8080
# base64 inflates by 4/3; leave room for the JSON envelope
MAX_BODY = MAX_BUNDLE_SIZE // 3 * 4 + 64 * 1024

REPORT_NAMES = {
    "reception": BundleFlags.REPORT_RECEPTION,
    "forwarding": BundleFlags.REPORT_FORWARDING,
    "delivery": BundleFlags.REPORT_DELIVERY,
    "deletion": BundleFlags.REPORT_DELETION,
}


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


def _report_flags(body: dict) -> int:
    flags = 0
    if body.get("report"):
        flags |= BundleFlags.REPORT_DELIVERY
    reports = body.get("reports", [])
    if not isinstance(reports, list):
        raise ApiError(400, "reports must be a list")
    for name in reports:
        try:
            flags |= REPORT_NAMES[name]
        except (KeyError, TypeError):
            raise ApiError(400, f"unknown report kind {name!r}; choose from {sorted(REPORT_NAMES)}") from None
    return flags


def _optional_uint(body: dict, key: str) -> int | None:
    value = body.get(key)
    if value is None:
        return None
    if not isinstance(value, int) or isinstance(value, bool) or value < 0 or value >= 2**64:
        raise ApiError(400, f"{key} must be an unsigned integer")
    return value


class _Handler(BaseHTTPRequestHandler):
    server: "_Server"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("agent %s - " + fmt, self.address_string(), *args)

    def _reply(self, status: int, obj) -> None:
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _body(self) -> dict:
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            raise ApiError(400, "bad Content-Length") from None
        if length > MAX_BODY:
            raise ApiError(413, "request body too large")
        raw = self.rfile.read(length) if length else b""
        try:
            body = json.loads(raw or b"{}")
        except ValueError as exc:
            raise ApiError(400, f"invalid JSON: {exc}") from None
        if not isinstance(body, dict):
            raise ApiError(400, "request body must be a JSON object")
        return body

    def _dispatch(self, method: str) -> None:
        url = urlsplit(self.path)
        route = self.server.routes.get((method, url.path.rstrip("/") or "/"))
        try:
            if route is None:
                known = {p for m, p in self.server.routes}
                raise ApiError(405 if url.path in known else 404, f"no route {method} {url.path}")
            status, result = route(self, parse_qs(url.query))
        except ApiError as exc:
            status, result = exc.status, {"error": str(exc)}
        except Exception as exc:
            log.exception("agent request %s %s failed", method, url.path)
            status, result = 500, {"error": f"internal error: {exc}"}
        self._reply(status, result)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    # routes

    def send_bundle(self, query):
        body = self._body()
        node = self.server.node
        try:
            destination = parse_eid(body["destination"])
        except KeyError:
            raise ApiError(400, "missing destination") from None
        except (EIDError, TypeError) as exc:
            raise ApiError(400, f"invalid destination: {exc}") from None
        text = body.get("payload_b64", "")
        if not isinstance(text, str):
            raise ApiError(400, "payload_b64 must be a string")
        try:
            payload = base64.b64decode(text, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise ApiError(400, f"invalid base64 payload: {exc}") from None
        if len(payload) > MAX_BUNDLE_SIZE - 4096:
            raise ApiError(400, "payload exceeds the bundle size limit")
        lifetime = _optional_uint(body, "lifetime")  # seconds
        if lifetime == 0 or (lifetime or 0) * 1_000_000 >= 2**64:
            raise ApiError(400, "lifetime must be a positive number of seconds")
        bid = node.send(
            destination,
            payload,
            lifetime=None if lifetime is None else lifetime * 1_000_000,
            report_flags=_report_flags(body),
            hop_limit=_optional_uint(body, "hop_limit"),
        )
        return 200, {"id": bid.key()}

    def fetch(self, query):
        node = self.server.node
        endpoint = None
        if "endpoint" in query:
            try:
                endpoint = parse_eid(query["endpoint"][0])
            except EIDError as exc:
                raise ApiError(400, f"invalid endpoint: {exc}") from None
        try:
            entries = node.fetch(endpoint)
        except NotFoundError as exc:
            raise ApiError(404, str(exc.args[0])) from None
        return 200, [e.to_json() for e in entries]

    def register(self, query):
        body = self._body()
        try:
            eid = parse_eid(body["endpoint"])
        except KeyError:
            raise ApiError(400, "missing endpoint") from None
        except (EIDError, TypeError) as exc:
            raise ApiError(400, f"invalid endpoint: {exc}") from None
        self.server.node.register(eid)
        return 200, {"endpoint": str(eid)}

    def status(self, query):
        return 200, self.server.node.status()

    def reports(self, query):
        return 200, self.server.node.status_reports()


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class AgentServer:
    """HTTP front end for a :class:`~bpnode.core.Node`."""

    def __init__(self, node, host: str = "127.0.0.1", port: int = DEFAULT_AGENT_PORT):
        self.node = node
        self.host = host
        self.port = port
        self._server: _Server | None = None
        self._thread: threading.Thread | None = None

    def start(self) -> "AgentServer":
        server = _Server((self.host, self.port), _Handler)
        server.node = self.node
        server.routes = {
            ("POST", "/send"): _Handler.send_bundle,
            ("GET", "/fetch"): _Handler.fetch,
            ("POST", "/register"): _Handler.register,
            ("GET", "/status"): _Handler.status,
            ("GET", "/reports"): _Handler.reports,
        }
        self._server = server
        self.port = server.server_address[1]
        self._thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.2}, name="agent-http", daemon=True)
        self._thread.start()
        return self

    @property
    def url(self) -> str:
        host = f"[{self.host}]" if ":" in self.host else self.host
        return f"http://{host}:{self.port}"

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
