"""Mock detection/recognition web service with a decision-only API.

Endpoints:

* ``POST /detect`` takes PNG bytes or ``{"image_b64": ...}`` and answers
  ``{"label": "real" | "fake"}``.
* ``POST /compare`` takes ``{"image_a_b64", "image_b_b64"}`` and answers
  ``{"similar": bool, "score": 0..100}``.
* ``GET /healthz`` reports liveness and how many ``/detect`` calls were served.
"""
from __future__ import annotations

import base64
import binascii
import json
import logging
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import nn
from .imgcore import ImageFormatError, decode_png
from .oracles import CNNDetector, Decision

logger = logging.getLogger(__name__)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
MAX_BODY = 8 * 1024 * 1024


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    detector: str = "cnn"
    threshold: float = 0.5
    compare_threshold: float = 0.6
    reject_no_face: bool = False
    # pixel variance below which an image is treated as faceless
    variance_floor: float = 1e-4
    client_budget: int | None = None
    expose_scores: bool = False

    def __post_init__(self):
        if self.detector not in ("cnn", "freq"):
            raise ValueError("detector must be 'cnn' or 'freq'")
        if not 0.0 <= self.compare_threshold <= 1.0:
            raise ValueError("compare_threshold must lie in [0, 1]")
        if self.client_budget is not None and self.client_budget <= 0:
            raise ValueError("client_budget must be positive")


class RequestError(Exception):
    def __init__(self, status, payload):
        super().__init__(payload)
        self.status = status
        self.payload = payload


class DetectionService:
    """Request handling logic, independent of the HTTP plumbing.

    ``detector_net`` backs the CNN detector, ``freq_stat`` the frequency
    detector and ``embedder`` the comparison endpoint.
    """

    def __init__(self, config, detector_net=None, embedder=None, freq_stat=None):
        self.config = config
        if config.detector == "cnn":
            if detector_net is None:
                raise ValueError("CNN service needs detector weights")
            self._cnn = CNNDetector(detector_net, config.threshold)
            self.input_shape = tuple(detector_net.input_shape)
        else:
            if freq_stat is None:
                raise ValueError("frequency service needs a calibrated FrequencyStatDetector")
            self._cnn = None
            self.input_shape = None
        self.freq_stat = freq_stat
        self.embedder = embedder
        self._lock = threading.Lock()
        self.queries_served = 0
        self._per_client = {}

    # -- helpers

    def _decode_b64(self, text):
        try:
            return self._decode_png(base64.b64decode(text, validate=True))
        except (binascii.Error, TypeError, ValueError) as exc:
            if isinstance(exc, RequestError):
                raise
            raise RequestError(400, {"error": "malformed", "detail": "bad base64 payload"}) from exc

    def _decode_png(self, data):
        try:
            img = decode_png(data)
        except ImageFormatError as exc:
            raise RequestError(400, {"error": "malformed", "detail": str(exc)}) from exc
        if self.input_shape is not None and img.shape != self.input_shape:
            raise RequestError(
                400, {"error": "malformed", "detail": f"expected image of shape {list(self.input_shape)}"}
            )
        return img

    def _charge(self, client):
        with self._lock:
            budget = self.config.client_budget
            used = self._per_client.get(client, 0)
            if budget is not None and used >= budget:
                raise RequestError(429, {"error": "budget_exhausted"})
            self._per_client[client] = used + 1
            self.queries_served += 1

    # -- endpoints

    def detect(self, body, content_type, client="anonymous"):
        if body[:8] == PNG_SIGNATURE or (content_type or "").startswith("image/png"):
            img = self._decode_png(body)
        else:
            try:
                text = json.loads(body)["image_b64"]
            except (ValueError, KeyError, TypeError) as exc:
                raise RequestError(400, {"error": "malformed", "detail": "expected PNG or image_b64"}) from exc
            img = self._decode_b64(text)
        # malformed requests are free; no-face rejections are billed
        self._charge(client)
        if self.config.reject_no_face and float(np.var(img)) < self.config.variance_floor:
            raise RequestError(422, {"error": "no_face"})
        if self._cnn is not None:
            score = self._cnn.fake_probability(img)
            label = Decision.FAKE if score > self.config.threshold else Decision.REAL
        else:
            score = self.freq_stat.ratio(img)
            label = self.freq_stat(img)
        out = {"label": "fake" if label == Decision.FAKE else "real"}
        if self.config.expose_scores:
            out["score"] = score
        return out

    def compare(self, body):
        if self.embedder is None:
            raise RequestError(400, {"error": "compare_unavailable"})
        try:
            payload = json.loads(body)
            a, b = payload["image_a_b64"], payload["image_b_b64"]
        except (ValueError, KeyError, TypeError) as exc:
            raise RequestError(400, {"error": "malformed", "detail": "expected image_a_b64 and image_b_b64"}) from exc
        img_a, img_b = self._decode_b64(a), self._decode_b64(b)
        if img_a.shape != tuple(self.embedder.input_shape) or img_b.shape != img_a.shape:
            raise RequestError(400, {"error": "malformed", "detail": "image shapes do not match the embedder"})
        cos = nn.cosine_similarity(nn.embed(self.embedder, img_a), nn.embed(self.embedder, img_b))
        score = 100.0 * max(0.0, cos)
        # 100 * 0.6 is 60.000000000000007 in binary; compare on a rounded cut
        cut = round(100.0 * self.config.compare_threshold, 9)
        return {"similar": bool(score >= cut), "score": score}

    def health(self):
        with self._lock:
            return {"status": "ok", "queries_served": self.queries_served}


class _Handler(BaseHTTPRequestHandler):
    service: DetectionService = None  # set on a per-server subclass
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        logger.debug("%s - " + fmt, self.address_string(), *args)

    def _send(self, status, payload):
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self):
        n = int(self.headers.get("Content-Length") or 0)
        if n > MAX_BODY:
            raise RequestError(400, {"error": "malformed", "detail": "body too large"})
        return self.rfile.read(n)

    def do_GET(self):
        if self.path == "/healthz":
            self._send(200, self.service.health())
        else:
            self._send(404, {"error": "not_found"})

    def do_POST(self):
        try:
            body = self._body()
            if self.path == "/detect":
                client = self.headers.get("X-Client-Id") or self.client_address[0]
                out = self.service.detect(body, self.headers.get("Content-Type"), client)
            elif self.path == "/compare":
                out = self.service.compare(body)
            else:
                self._send(404, {"error": "not_found"})
                return
        except RequestError as exc:
            self._send(exc.status, exc.payload)
            return
        except Exception:  # keep the server alive; report as a server fault
            logger.exception("request failed")
            self._send(500, {"error": "internal"})
            return
        self._send(200, out)


def make_server(service, host=None, port=None):
    """Bind a threaded HTTP server for ``service``; port 0 picks a free port."""
    cfg = service.config
    handler = type("BoundHandler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host or cfg.host, cfg.port if port is None else port), handler)
    server.daemon_threads = True
    return server


class BackgroundServer:
    """Context manager running a server on a daemon thread; ``url`` is its base URL."""

    def __init__(self, service, host="127.0.0.1", port=0):
        self.server = make_server(service, host, port)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self):
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)


def serve(service):
    """Serve until interrupted."""
    server = make_server(service)
    logger.info("serving on http://%s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
