"""Streaming inference: newline-delimited JSON requests in, one JSON
response per line out, over stdio or TCP.

Requests: {"video": [768 numbers], "audio": [768 numbers], "id": optional}.
Responses: {"id", "probability", "label", "elapsed_ms"} where elapsed_ms
times the model forward pass only. Malformed requests produce a single
{"error": ...} line and the stream continues; blank lines are ignored.
On shutdown a latency summary (count, mean, p50, p95, max, for both
model-only and end-to-end time) is emitted as one JSON line.
"""

from __future__ import annotations

import json
import signal
import socketserver
import threading
import time

import numpy as np

from .data import FEATURE_DIM
from .errors import FormatError, FusionFraudError
from .model import ModelParams, model_forward


def parse_request(line: str, feature_dim: int = FEATURE_DIM):
    """Decode one request line; raises FormatError with a reason."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise FormatError("request must be a JSON object")
    for key in ("video", "audio"):
        if key not in obj:
            raise FormatError(f"missing {key!r}")
    try:
        video = np.asarray(obj["video"], dtype=np.float64)
        audio = np.asarray(obj["audio"], dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError("features must be arrays of numbers") from None
    if video.shape != (feature_dim,):
        raise FormatError(f"video has {video.size} values, expected {feature_dim}")
    if audio.shape != (feature_dim,):
        raise FormatError(f"audio has {audio.size} values, expected {feature_dim}")
    if not (np.isfinite(video).all() and np.isfinite(audio).all()):
        raise FormatError("non-finite feature values")
    return obj.get("id"), video, audio


class LatencyStats:
    """Thread-safe latency accumulator; one instance per server."""

    def __init__(self):
        self._model_ms: list[float] = []
        self._total_ms: list[float] = []
        self._lock = threading.Lock()

    def record(self, model_ms: float, total_ms: float) -> None:
        with self._lock:
            self._model_ms.append(model_ms)
            self._total_ms.append(total_ms)

    @staticmethod
    def _percentile(sorted_vals, q: float) -> float:
        # nearest-rank percentile on the sorted sample
        import math
        rank = max(1, math.ceil(q / 100.0 * len(sorted_vals)))
        return sorted_vals[rank - 1]

    def summary(self) -> dict:
        with self._lock:
            model = sorted(self._model_ms)
            total = sorted(self._total_ms)

        def stats(vals):
            if not vals:
                return {"mean": 0.0, "p50": 0.0, "p95": 0.0, "max": 0.0}
            return {"mean": sum(vals) / len(vals),
                    "p50": self._percentile(vals, 50),
                    "p95": self._percentile(vals, 95),
                    "max": vals[-1]}

        return {"event": "latency_summary", "count": len(model),
                "model_ms": stats(model), "total_ms": stats(total)}


def predict_line(params: ModelParams, threshold: float, line: str,
                 stats: LatencyStats | None = None) -> str:
    """One request line -> one response line (or an error line)."""
    t_start = time.perf_counter()
    try:
        ident, video, audio = parse_request(line, params.dims.feature_dim)
    except FormatError as exc:
        return json.dumps({"error": str(exc), "id": None})
    t0 = time.perf_counter()
    try:
        p, _ = model_forward(params, video, audio, train_mode=False)
    except FusionFraudError as exc:
        return json.dumps({"error": str(exc), "id": ident})
    model_ms = (time.perf_counter() - t0) * 1000.0
    label = "fraud" if p >= threshold else "legit"
    out = json.dumps({"id": ident, "probability": p, "label": label,
                      "elapsed_ms": round(model_ms, 4)})
    if stats is not None:
        stats.record(model_ms, (time.perf_counter() - t_start) * 1000.0)
    return out


def serve_stream(params: ModelParams, threshold: float, lines, write,
                 stats: LatencyStats | None = None) -> tuple[int, int]:
    """Drive a request/response stream; returns (handled, errors).

    ``lines`` yields raw request lines, ``write`` receives each response
    line (newline included). Responses keep request order.
    """
    handled = errors = 0
    for raw in lines:
        line = raw.strip()
        if not line:
            continue
        response = predict_line(params, threshold, line, stats)
        write(response + "\n")
        handled += 1
        if response.startswith('{"error"'):
            errors += 1
    return handled, errors


def serve_stdio(params: ModelParams, threshold: float, stdin, stdout, stderr) -> int:
    stats = LatencyStats()

    def write(text):
        stdout.write(text)
        stdout.flush()

    serve_stream(params, threshold, stdin, write, stats)
    stderr.write(json.dumps(stats.summary()) + "\n")
    stderr.flush()
    return 0


def serve_tcp(params: ModelParams, threshold: float, port: int, stderr,
              ready_callback=None):
    """Threaded TCP server; one line-oriented exchange per connection.

    Connections share the read-only params; each connection is handled
    sequentially so responses keep request order. Runs until interrupted,
    then emits the latency summary on ``stderr``. Returns the bound port.
    """
    stats = LatencyStats()

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            def write(text):
                self.wfile.write(text.encode("utf-8"))
                self.wfile.flush()

            lines = (raw.decode("utf-8", errors="replace") for raw in self.rfile)
            serve_stream(params, threshold, lines, write, stats)

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    # SIGTERM should shut down as cleanly as Ctrl-C so the summary still
    # prints; signal handlers are only legal in the main thread (tests
    # drive serve_tcp from worker threads and stop it via shutdown()).
    def _terminate(signum, frame):
        raise KeyboardInterrupt

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, _terminate)

    with Server(("127.0.0.1", port), Handler) as server:
        bound_port = server.server_address[1]
        stderr.write(f"listening on tcp port {bound_port}\n")
        stderr.flush()
        if ready_callback is not None:
            ready_callback(server, bound_port)
        try:
            server.serve_forever(poll_interval=0.1)
        except KeyboardInterrupt:
            pass
        finally:
            stderr.write(json.dumps(stats.summary()) + "\n")
            stderr.flush()
    return 0
