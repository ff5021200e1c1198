"""The black-box victim T: local wrapper, HTTP server, and metering client.

Two response modes exist. In label mode the response carries hard labels
only; in probability mode it adds the full probability rows (labels stay the
pre-rounding argmax). Every handle meters its queries in a ledger split by
training/evaluation phase, and responses are plain numpy arrays, so no
gradient ever flows back through the victim.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import threading
import time
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional, Tuple

import numpy as np
import requests

from .engine import Tensor, pause_tape
from .nets import ClassifierModel

WIRE_DECIMALS = 6


class ProtocolError(RuntimeError):
    """The server rejected the request (bad shape, bad body, wrong mode)."""


class TransportError(RuntimeError):
    """The endpoint stayed unreachable through all retries."""


class OracleMode(enum.Enum):
    LABEL_ONLY = "label"
    PROBABILITY_ONLY = "prob"


@dataclasses.dataclass
class OracleResponse:
    """labels always; probs only in probability mode."""

    labels: np.ndarray
    probs: Optional[np.ndarray] = None


@dataclasses.dataclass
class QueryLedger:
    total_samples: int = 0
    total_calls: int = 0
    train_samples: int = 0
    train_calls: int = 0
    eval_samples: int = 0
    eval_calls: int = 0

    def add(self, batch: int, phase: str) -> None:
        if phase == "train":
            self.train_samples += batch
            self.train_calls += 1
        elif phase == "eval":
            self.eval_samples += batch
            self.eval_calls += 1
        else:
            raise ValueError(f"unknown ledger phase {phase!r}")
        self.total_samples += batch
        self.total_calls += 1

    def copy(self) -> "QueryLedger":
        return dataclasses.replace(self)


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def _model_outputs(model: ClassifierModel, x: np.ndarray,
                   chunk: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    """Victim forward: (labels, probs) as plain arrays, never taped."""
    from .engine import ops

    probs_parts = []
    with pause_tape():
        for start in range(0, x.shape[0], chunk):
            logits = model.forward(Tensor(x[start:start + chunk]))
            probs_parts.append(ops.softmax(logits).data)
    probs = np.concatenate(probs_parts, axis=0)
    return np.argmax(probs, axis=1), probs


class LocalOracle:
    """In-process victim handle; thread-safe ledger."""

    def __init__(self, model: ClassifierModel, mode: OracleMode):
        self.model = model
        self.mode = mode
        self.num_classes = model.num_classes
        self._ledger = QueryLedger()
        self._lock = threading.Lock()

    def query(self, x, phase: str = "train") -> OracleResponse:
        xd = _as_array(x)
        if xd.shape[1:] != self.model.input_shape:
            raise ProtocolError(
                f"input shape {xd.shape[1:]} does not match victim "
                f"{self.model.input_shape}")
        if not np.isfinite(xd).all():
            raise ProtocolError("query contains non-finite values")
        labels, probs = _model_outputs(self.model, xd)
        with self._lock:
            self._ledger.add(xd.shape[0], phase)
        if self.mode is OracleMode.LABEL_ONLY:
            return OracleResponse(labels=labels)
        return OracleResponse(labels=labels, probs=probs)

    def snapshot_ledger(self) -> QueryLedger:
        with self._lock:
            return self._ledger.copy()


def snapshot_ledger(oracle) -> QueryLedger:
    return oracle.snapshot_ledger()


# ---------------------------------------------------------------------------
# wire protocol
#
# POST /classify  {"mode": "label"|"prob", "shape": [m,c,h,w], "data": [...]}
#   -> {"labels": [...]}                      (label mode)
#   -> {"labels": [...], "probs": [[...]]}    (prob mode, rounded to 6 places)


def _validate_request(payload, model_shape) -> Tuple[str, np.ndarray]:
    if not isinstance(payload, dict):
        raise ValueError("body must be a JSON object")
    mode = payload.get("mode")
    if mode not in ("label", "prob"):
        raise ValueError(f"mode must be 'label' or 'prob', got {mode!r}")
    shape = payload.get("shape")
    if (not isinstance(shape, list) or not shape
            or not all(isinstance(v, int) and v > 0 for v in shape)):
        raise ValueError("shape must be a list of positive integers")
    data = payload.get("data")
    if not isinstance(data, list):
        raise ValueError("data must be a flat list of numbers")
    expected = int(np.prod(shape))
    if len(data) != expected:
        raise ValueError(f"data length {len(data)} does not match shape "
                         f"(expected {expected})")
    x = np.asarray(data, dtype=np.float32)
    if not np.isfinite(x).all():
        raise ValueError("data contains non-finite values")
    x = x.reshape(shape)
    if tuple(shape[1:]) != tuple(model_shape):
        raise ValueError(f"sample shape {tuple(shape[1:])} does not match "
                         f"victim input {tuple(model_shape)}")
    return mode, x


class VictimServer:
    """HTTP service exposing one victim model on /classify.

    The server's own ledger books every served sample under the training
    phase; the train/eval split that reports care about is metered on the
    client handle issuing the queries.
    """

    def __init__(self, model: ClassifierModel, mode: OracleMode,
                 host: str = "127.0.0.1", port: int = 0,
                 rate_limit: Optional[float] = None,
                 log_path: Optional[str] = None):
        self.oracle = LocalOracle(model, mode)
        self.mode = mode
        self.host = host
        self.port = port
        self.rate_limit = rate_limit
        self.log_path = log_path
        self._httpd: Optional[ThreadingHTTPServer] = None
        self._thread: Optional[threading.Thread] = None
        self._log_lock = threading.Lock()
        self._last_request = 0.0

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def _log_request(self, batch: int, mode: str) -> None:
        if self.log_path is None:
            return
        line = json.dumps({
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "batch": batch,
            "mode": mode,
        })
        with self._log_lock:
            with open(self.log_path, "a") as fh:
                fh.write(line + "\n")

    def _over_rate_limit(self) -> bool:
        if self.rate_limit is None:
            return False
        now = time.monotonic()
        with self._log_lock:
            if now - self._last_request < 1.0 / self.rate_limit:
                return True
            self._last_request = now
            return False

    def start(self) -> "VictimServer":
        if self._httpd is not None:
            return self  # idempotent: `with serve_victim(...)` enters started
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # silence default stderr noise
                pass

            def _send_json(self, code: int, obj) -> None:
                body = json.dumps(obj).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                if self.path != "/classify":
                    self._send_json(404, {"error": "unknown path"})
                    return
                if server._over_rate_limit():
                    self._send_json(429, {"error": "rate limit exceeded"})
                    return
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    payload = json.loads(self.rfile.read(length))
                    mode, x = _validate_request(payload,
                                                server.oracle.model.input_shape)
                except (ValueError, json.JSONDecodeError) as exc:
                    self._send_json(400, {"error": str(exc)})
                    return
                if mode == "prob" and server.mode is OracleMode.LABEL_ONLY:
                    self._send_json(403, {"error": "probabilities not offered "
                                                   "by this endpoint"})
                    return
                response = server.oracle.query(x, phase="train")
                server._log_request(x.shape[0], mode)
                out = {"labels": [int(v) for v in response.labels]}
                if mode == "prob":
                    out["probs"] = [
                        [round(float(v), WIRE_DECIMALS) for v in row]
                        for row in response.probs
                    ]
                self._send_json(200, out)

        # binding can transiently fail right after another server released
        # its socket; a short retry keeps startup dependable
        for attempt in range(5):
            try:
                self._httpd = ThreadingHTTPServer((self.host, self.port), Handler)
                break
            except OSError:
                if attempt == 4:
                    raise
                time.sleep(0.05 * (attempt + 1))
        self.port = self._httpd.server_address[1]
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    def __enter__(self) -> "VictimServer":
        return self.start()

    def __exit__(self, exc_type, exc, tb) -> None:
        self.stop()


def serve_victim(model: ClassifierModel, mode: OracleMode, host: str = "127.0.0.1",
                 port: int = 0, rate_limit: Optional[float] = None,
                 log_path: Optional[str] = None) -> VictimServer:
    """Start serving and return the running server (port 0 picks a free one)."""
    return VictimServer(model, mode, host, port, rate_limit, log_path).start()


class RemoteOracle:
    """Client handle for a served victim; retries transient failures.

    Three retries with exponential backoff, then ``TransportError``. The
    ledger advances only on success, so persistent failures leave it truthful.
    """

    RETRIES = 3
    BACKOFF = 0.2

    def __init__(self, endpoint: str, mode: OracleMode, timeout: float = 30.0):
        self.endpoint = endpoint.rstrip("/")
        self.mode = mode
        self.timeout = timeout
        self._ledger = QueryLedger()
        self._lock = threading.Lock()
        self._session = requests.Session()

    def query(self, x, phase: str = "train") -> OracleResponse:
        xd = _as_array(x)
        payload = {
            "mode": self.mode.value,
            "shape": [int(v) for v in xd.shape],
            "data": [float(v) for v in xd.ravel()],
        }
        last_exc: Optional[Exception] = None
        for attempt in range(self.RETRIES + 1):
            if attempt:
                time.sleep(self.BACKOFF * 2 ** (attempt - 1))
            try:
                resp = self._session.post(f"{self.endpoint}/classify",
                                          json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code == 200:
                return self._accept(resp.json(), xd.shape[0], phase)
            if resp.status_code in (429, 500, 502, 503, 504):
                last_exc = TransportError(
                    f"server answered {resp.status_code}: {resp.text[:200]}")
                continue
            raise ProtocolError(
                f"server rejected request ({resp.status_code}): {resp.text[:200]}")
        raise TransportError(
            f"endpoint {self.endpoint} unreachable after "
            f"{self.RETRIES + 1} attempts: {last_exc}")

    def _accept(self, body: dict, batch: int, phase: str) -> OracleResponse:
        labels = np.asarray(body["labels"], dtype=np.int64)
        if labels.shape != (batch,):
            raise ProtocolError(f"server returned {labels.shape[0]} labels "
                                f"for a batch of {batch}")
        probs = None
        if self.mode is OracleMode.PROBABILITY_ONLY:
            if "probs" not in body:
                raise ProtocolError("probability mode but no probs in response")
            probs = np.asarray(body["probs"], dtype=np.float32)
            if probs.shape[0] != batch:
                raise ProtocolError("probs row count does not match batch")
        with self._lock:
            self._ledger.add(batch, phase)
        return OracleResponse(labels=labels, probs=probs)

    def snapshot_ledger(self) -> QueryLedger:
        with self._lock:
            return self._ledger.copy()
