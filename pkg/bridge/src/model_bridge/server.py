"""Newline-delimited JSON scoring service over stdio or TCP.

Wire protocol (version 1): the bridge speaks first with a hello line

    {"proto": 1, "k": K, "kind": "logit"|"probability", "contrastive": true, ...}

then answers requests one line each, echoing the request id:

    -> {"id": n, "shape": [H, W, C], "pixels": "<base64 LE float32>"}
    -> {"id": n, "path": "/local/image.png"}
    <- {"id": n, "scores": [...], "contrast_scores": [...]}
    <- {"id": n, "error": "..."}

The hello also records the model identifier and normalization constants so
run artifacts can say exactly what produced the scores.  A request that
cannot be decoded or scored gets an error reply; the process itself stays
up.  Replies preserve request order.  Requests already buffered when one
arrives are drained and scored in a single forward pass, capped at the
configured batch size; a strictly serial caller simply gets batches of one.
"""

from __future__ import annotations

import base64
import json
import queue
import socket
import sys
import threading

import numpy as np

from .config import BridgeConfig, BridgeError
from .hosting import HostedClassifier

PROTOCOL_VERSION = 1


def log_event(event: str, **fields) -> None:
    """One JSON line per event on stderr; stdout belongs to the protocol."""
    print(json.dumps({"event": event, **fields}), file=sys.stderr, flush=True)


def hello_message(host: HostedClassifier) -> dict:
    cfg = host.config
    return {
        "proto": PROTOCOL_VERSION,
        "k": host.k,
        "kind": cfg.kind,
        "contrastive": True,
        "model": cfg.model,
        "device": cfg.device,
        "batch_size": cfg.batch_size,
        "normalization": {"mean": list(cfg.mean), "std": list(cfg.std)},
        "contrast_bias": "negated" if cfg.negate_bias else "kept",
    }


def _load_image_file(path: str, channels: int) -> np.ndarray:
    if channels not in (1, 3):
        raise ValueError(
            f"path requests need 1- or 3-channel normalization, got {channels}")
    from PIL import Image
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB" if channels == 3 else "L"),
                              dtype=np.float32) / 255.0
    except (OSError, ValueError) as err:
        raise ValueError(f"cannot read image file {path}: {err}") from err
    if data.ndim == 2:
        data = data[:, :, None]
    return data


def decode_request(message: dict, channels: int) -> np.ndarray:
    """Return the request's (h, w, c) float32 image, however it was sent."""
    inline = "pixels" in message or "shape" in message
    if inline and "path" in message:
        raise ValueError("request carries both inline pixels and a path")
    if "path" in message:
        return _load_image_file(str(message["path"]), channels)
    if "shape" not in message or "pixels" not in message:
        raise ValueError("request needs either shape and pixels or a path")
    shape = message["shape"]
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0
                       for v in shape)):
        raise ValueError(f"shape must be three positive integers, got {shape!r}")
    h, w, c = shape
    try:
        raw = base64.b64decode(str(message["pixels"]).encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as err:
        raise ValueError(f"pixels are not valid base64: {err}") from err
    expected = h * w * c * 4
    if len(raw) != expected:
        raise ValueError(f"pixel payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, c).astype(np.float32)


class StdioChannel:
    """Line transport on this process's stdin/stdout."""

    def __init__(self):
        self._in = sys.stdin.buffer
        self._out = sys.stdout.buffer

    def readline(self) -> str | None:
        line = self._in.readline()
        return None if line == b"" else line.decode("utf-8", errors="replace")

    def write(self, text: str) -> None:
        self._out.write(text.encode("utf-8") + b"\n")
        self._out.flush()


class TcpChannel:
    """Line transport on one accepted TCP connection."""

    def __init__(self, conn: socket.socket):
        self._reader = conn.makefile("rb")
        self._writer = conn.makefile("wb")

    def readline(self) -> str | None:
        line = self._reader.readline()
        return None if line == b"" else line.decode("utf-8", errors="replace")

    def write(self, text: str) -> None:
        self._writer.write(text.encode("utf-8") + b"\n")
        self._writer.flush()


def _parse_line(line: str, channels: int):
    """Return [request_id, image | None, error | None] for one raw line."""
    try:
        message = json.loads(line)
    except json.JSONDecodeError as err:
        return [None, None, f"invalid JSON: {err}"]
    if not isinstance(message, dict):
        return [None, None, "request must be a JSON object"]
    if "id" not in message:
        return [None, None, "request lacks an id"]
    request_id = message["id"]
    try:
        image = decode_request(message, channels)
    except ValueError as err:
        return [request_id, None, str(err)]
    return [request_id, image, None]


def _respond_batch(host: HostedClassifier, channel, lines: list[str]) -> None:
    entries = [_parse_line(line, host.config.channels) for line in lines]
    # One forward pass per distinct image shape within the burst.
    by_shape: dict[tuple, list[int]] = {}
    for index, (_, image, error) in enumerate(entries):
        if error is None:
            by_shape.setdefault(image.shape, []).append(index)
    for indices in by_shape.values():
        stack = np.stack([entries[i][1] for i in indices])
        try:
            scores, contrast = host.score(stack)
        except Exception as err:
            for i in indices:
                entries[i][2] = f"model failure: {err}"
            continue
        for row, i in enumerate(indices):
            entries[i][1] = (scores[row], contrast[row])
    for request_id, payload, error in entries:
        if error is not None:
            channel.write(json.dumps({"id": request_id, "error": error}))
        else:
            plain, contrast = payload
            channel.write(json.dumps({
                "id": request_id,
                "scores": [float(v) for v in plain],
                "contrast_scores": [float(v) for v in contrast],
            }))


def serve_channel(host: HostedClassifier, channel) -> None:
    """Answer requests on one channel until its input ends."""
    channel.write(json.dumps(hello_message(host)))
    lines: queue.Queue = queue.Queue()

    def pump() -> None:
        while True:
            line = channel.readline()
            lines.put(line)
            if line is None:
                return

    threading.Thread(target=pump, daemon=True).start()
    while True:
        line = lines.get()
        if line is None:
            return
        batch = [line]
        closing = False
        while len(batch) < host.config.batch_size:
            try:
                extra = lines.get_nowait()
            except queue.Empty:
                break
            if extra is None:
                closing = True
                break
            batch.append(extra)
        _respond_batch(host, channel, batch)
        if closing:
            return


def serve(config: BridgeConfig, tcp: str | None = None) -> int:
    """Run the bridge until stdin closes (stdio) or forever (TCP)."""
    try:
        host = HostedClassifier(config)
    except BridgeError as err:
        log_event("error", message=str(err))
        return 1
    log_event("start", model=config.model, k=host.k, head=host.head_path,
              kind=config.kind, contrast_bias="negated" if config.negate_bias else "kept")
    if tcp is None:
        serve_channel(host, StdioChannel())
        return 0
    return _serve_tcp(host, tcp)


def _serve_tcp(host: HostedClassifier, address: str) -> int:
    name, sep, port_text = address.rpartition(":")
    try:
        port = int(port_text)
    except ValueError:
        sep = ""
    if not sep or not name:
        log_event("error", message=f"tcp address must be host:port, got {address!r}")
        return 1
    try:
        server = socket.create_server((name, port))
    except OSError as err:
        log_event("error", message=f"cannot listen on {address}: {err}")
        return 1
    # Port 0 asks the OS for a free port; the log line is how callers learn it.
    log_event("listening", host=name, port=server.getsockname()[1])
    try:
        while True:
            conn, peer = server.accept()
            log_event("connected", peer=f"{peer[0]}:{peer[1]}")
            try:
                serve_channel(host, TcpChannel(conn))
            except OSError as err:
                log_event("disconnect", message=str(err))
            finally:
                conn.close()
    except KeyboardInterrupt:
        return 0
    finally:
        server.close()
