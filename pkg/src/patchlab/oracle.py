"""Classifier access: in-process linear probes and external scoring peers.

Every oracle answers score_batch(images) -> list[OracleScores] with a fixed
category count k and a declared score kind.  Contrastive saliency needs a
second head; ContrastiveOracle pairs a base oracle f with a contrast oracle
f' (canonically f with its final-layer weights negated) and scores both in
one pass.

External peers speak newline-delimited JSON over a subprocess's stdio or a
TCP socket.  The peer sends a hello first:

    {"proto": 1, "k": K, "kind": "logit"|"probability", "contrastive": bool}

then answers one request at a time:

    -> {"id": n, "shape": [H, W, C], "pixels": "<base64 LE float32>"}
    <- {"id": n, "scores": [...], "contrast_scores": [...]}   (contrast only
       when advertised)

An {"id": n, "error": "..."} reply surfaces as a TransportError carrying the
position of the failed image within the batch.
"""

from __future__ import annotations

import base64
import json
import shlex
import socket
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ProtocolError, ShapeError, TransportError, VersionError
from .imaging import ImageTensor

KIND_LOGIT = "logit"
KIND_PROBABILITY = "probability"
KINDS = (KIND_LOGIT, KIND_PROBABILITY)

PROTOCOL_VERSION = 1
PROBABILITY_SUM_TOL = 1e-6


@dataclass(frozen=True)
class OracleScores:
    """One image's scores over all k categories."""

    scores: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"score kind must be one of {KINDS}, got {self.kind!r}")
        arr = np.asarray(self.scores, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ShapeError(f"scores must be a nonempty vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("scores must be finite")
        if self.kind == KIND_PROBABILITY:
            if np.any(arr < 0.0):
                raise ContractError("probability scores must be nonnegative")
            total = float(arr.sum())
            if abs(total - 1.0) > PROBABILITY_SUM_TOL:
                raise ContractError(f"probability scores must sum to 1, got {total}")
        arr.flags.writeable = False
        object.__setattr__(self, "scores", arr)

    @property
    def k(self) -> int:
        return int(self.scores.size)


class LinearProbeClassifier:
    """Per-category linear field scorer: score_c(x) = sum(w_c * x) + b_c."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, kind: str = KIND_LOGIT):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 4:
            raise ShapeError(f"weight must be (k, H, W, C), got shape {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias must be ({weight.shape[0]},), got shape {bias.shape}")
        if kind not in KINDS:
            raise ContractError(f"score kind must be one of {KINDS}, got {kind!r}")
        self.weight = weight
        self.bias = bias
        self.kind = kind

    @property
    def k(self) -> int:
        return int(self.weight.shape[0])

    def _check(self, image: ImageTensor) -> None:
        if image.shape != self.weight.shape[1:]:
            raise ShapeError(
                f"probe expects images of shape {self.weight.shape[1:]}, got {image.shape}")

    def score_batch(self, images: list[ImageTensor]) -> list[OracleScores]:
        out = []
        for image in images:
            self._check(image)
            raw = np.tensordot(self.weight, image.data.astype(np.float64), axes=3) + self.bias
            if self.kind == KIND_PROBABILITY:
                raw = np.exp(raw - raw.max())
                raw /= raw.sum()
            out.append(OracleScores(raw, self.kind))
        return out

    def negated_head(self, negate_bias: bool = True) -> "LinearProbeClassifier":
        bias = -self.bias if negate_bias else self.bias
        return LinearProbeClassifier(-self.weight, bias, self.kind)


def save_linear_probe(path: str | Path, probe: LinearProbeClassifier) -> None:
    np.savez(path, weight=probe.weight, bias=probe.bias, kind=np.array(probe.kind))


def load_linear_probe(path: str | Path) -> LinearProbeClassifier:
    with np.load(path) as data:
        kind = str(data["kind"]) if "kind" in data else KIND_LOGIT
        return LinearProbeClassifier(data["weight"], data["bias"], kind)


@dataclass
class ContrastiveOracle:
    """A base scorer f plus the contrast scorer f' used for saliency.

    ``paired`` optionally points at a peer that returns both score vectors in
    one round trip; when absent, base and contrast are scored separately.
    """

    base: object
    contrast: object
    paired: object | None = None

    @property
    def k(self) -> int:
        return self.base.k

    @property
    def kind(self) -> str:
        return self.base.kind

    @classmethod
    def from_linear_probe(cls, probe: LinearProbeClassifier,
                          negate_bias: bool = True) -> "ContrastiveOracle":
        return cls(base=probe, contrast=probe.negated_head(negate_bias))

    def score_both_batch(self, images: list[ImageTensor]) -> list[tuple[OracleScores, OracleScores]]:
        if self.paired is not None:
            return self.paired.score_both_batch(images)
        return list(zip(self.base.score_batch(images), self.contrast.score_batch(images)))


def score_batch(oracle, images, batch_size: int = 64) -> list[OracleScores]:
    """Score any iterable of images in order, chunked for the oracle."""
    images = list(images)
    out: list[OracleScores] = []
    for start in range(0, len(images), batch_size):
        out.extend(oracle.score_batch(images[start:start + batch_size]))
    return out


def contrastive_score(oracle: ContrastiveOracle, x: ImageTensor, category: int) -> float:
    if not 0 <= category < oracle.k:
        raise ContractError(f"category {category} out of range for k={oracle.k}")
    base, contrast = oracle.score_both_batch([x])[0]
    return float(base.scores[category] - contrast.scores[category])


def encode_pixels(image: ImageTensor) -> str:
    return base64.b64encode(image.data.astype("<f4").tobytes()).decode("ascii")


def decode_pixels(shape, pixels: str) -> np.ndarray:
    h, w, c = (int(v) for v in shape)
    raw = base64.b64decode(pixels.encode("ascii"), validate=True)
    expected = h * w * c * 4
    if len(raw) != expected:
        raise ProtocolError(f"pixel payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, c).astype(np.float32)


class _StdioTransport:
    """Line transport over a child process's stdin/stdout."""

    def __init__(self, command: str):
        self.proc = subprocess.Popen(
            shlex.split(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, encoding="utf-8")

    def send(self, line: str) -> None:
        try:
            self.proc.stdin.write(line + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as err:
            raise TransportError(f"scoring peer closed its stdin: {err}") from err

    def recv(self) -> str:
        line = self.proc.stdout.readline()
        if line == "":
            code = self.proc.poll()
            raise TransportError(f"scoring peer closed its stdout (exit status {code})")
        return line

    def close(self) -> None:
        try:
            if self.proc.stdin:
                self.proc.stdin.close()
            self.proc.wait(timeout=5)
        except Exception:
            self.proc.kill()


class _TcpTransport:
    def __init__(self, host: str, port: int):
        self.sock = socket.create_connection((host, port))
        self.reader = self.sock.makefile("r", encoding="utf-8")
        self.writer = self.sock.makefile("w", encoding="utf-8")

    def send(self, line: str) -> None:
        try:
            self.writer.write(line + "\n")
            self.writer.flush()
        except OSError as err:
            raise TransportError(f"scoring peer connection failed: {err}") from err

    def recv(self) -> str:
        line = self.reader.readline()
        if line == "":
            raise TransportError("scoring peer closed the connection")
        return line

    def close(self) -> None:
        try:
            self.reader.close()
            self.writer.close()
            self.sock.close()
        except OSError:
            pass


class ExternalOracle:
    """Client for a scoring peer speaking the JSON-lines protocol."""

    def __init__(self, transport, expect_version: int = PROTOCOL_VERSION):
        self._transport = transport
        self._lock = threading.Lock()
        self._next_id = 0
        hello = self._read_message()
        proto = hello.get("proto")
        if proto != expect_version:
            raise VersionError(f"peer speaks protocol {proto!r}, expected {expect_version}")
        try:
            self.k = int(hello["k"])
            self.kind = str(hello["kind"])
        except (KeyError, TypeError, ValueError) as err:
            raise ProtocolError(f"malformed hello: {hello!r}") from err
        if self.k < 1:
            raise ProtocolError(f"peer advertises k={self.k}")
        if self.kind not in KINDS:
            raise ProtocolError(f"peer advertises unknown score kind {self.kind!r}")
        self.contrastive = bool(hello.get("contrastive", False))
        self.hello = hello

    def _read_message(self) -> dict:
        line = self._transport.recv()
        try:
            message = json.loads(line)
        except json.JSONDecodeError as err:
            raise ProtocolError(f"peer sent invalid JSON: {line!r}") from err
        if not isinstance(message, dict):
            raise ProtocolError(f"peer sent a non-object message: {message!r}")
        return message

    def _round_trip(self, image: ImageTensor, batch_index: int) -> dict:
        request_id = self._next_id
        self._next_id += 1
        request = {
            "id": request_id,
            "shape": [image.height, image.width, image.channels],
            "pixels": encode_pixels(image),
        }
        self._transport.send(json.dumps(request))
        reply = self._read_message()
        if reply.get("id") != request_id:
            raise ProtocolError(
                f"reply id {reply.get('id')!r} does not match request id {request_id}")
        if "error" in reply:
            raise TransportError(f"peer failed to score image: {reply['error']}",
                                 batch_index=batch_index)
        return reply

    def _parse_scores(self, values) -> OracleScores:
        if not isinstance(values, list) or len(values) != self.k:
            raise ProtocolError(f"peer returned {len(values) if isinstance(values, list) else type(values).__name__} scores, expected {self.k}")
        return OracleScores(np.asarray(values, dtype=np.float64), self.kind)

    def score_batch(self, images: list[ImageTensor]) -> list[OracleScores]:
        with self._lock:
            return [self._parse_scores(self._round_trip(im, i)["scores"])
                    for i, im in enumerate(images)]

    def score_both_batch(self, images: list[ImageTensor]) -> list[tuple[OracleScores, OracleScores]]:
        if not self.contrastive:
            raise ContractError("peer does not advertise contrastive scoring")
        out = []
        with self._lock:
            for i, image in enumerate(images):
                reply = self._round_trip(image, i)
                if "contrast_scores" not in reply:
                    raise ProtocolError("contrastive peer reply lacks contrast_scores")
                out.append((self._parse_scores(reply["scores"]),
                            self._parse_scores(reply["contrast_scores"])))
        return out

    def contrast_view(self) -> "_ContrastView":
        return _ContrastView(self)

    def close(self) -> None:
        self._transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _ContrastView:
    """Presents the contrast half of a contrastive peer as a plain oracle."""

    def __init__(self, handle: ExternalOracle):
        self._handle = handle

    @property
    def k(self) -> int:
        return self._handle.k

    @property
    def kind(self) -> str:
        return self._handle.kind

    def score_batch(self, images: list[ImageTensor]) -> list[OracleScores]:
        return [pair[1] for pair in self._handle.score_both_batch(images)]


def external_oracle_connect(address: str, expect_version: int = PROTOCOL_VERSION) -> ExternalOracle:
    """Connect to ``cmd:<argv>`` (subprocess stdio) or ``tcp:<host>:<port>``."""
    if address.startswith("cmd:"):
        return ExternalOracle(_StdioTransport(address[len("cmd:"):]), expect_version)
    if address.startswith("tcp:"):
        rest = address[len("tcp:"):]
        host, sep, port = rest.rpartition(":")
        if not sep or not host:
            raise ContractError(f"tcp address must be tcp:<host>:<port>, got {address!r}")
        return ExternalOracle(_TcpTransport(host, int(port)), expect_version)
    raise ContractError(f"oracle address must start with cmd: or tcp:, got {address!r}")


def resolve_oracle(spec: str):
    """Turn a CLI oracle spec into a scorer.

    ``builtin:linear:<weights.npz>`` loads an in-process linear probe; the
    ``cmd:``/``tcp:`` forms connect to an external peer.
    """
    if spec.startswith("builtin:linear:"):
        return load_linear_probe(spec[len("builtin:linear:"):])
    return external_oracle_connect(spec)


def as_contrastive(oracle, negate_bias: bool = True) -> ContrastiveOracle:
    """Build the paired (f, f') view needed by saliency estimation."""
    if isinstance(oracle, ContrastiveOracle):
        return oracle
    if isinstance(oracle, LinearProbeClassifier):
        return ContrastiveOracle.from_linear_probe(oracle, negate_bias)
    if isinstance(oracle, ExternalOracle):
        if not oracle.contrastive:
            raise ContractError("external peer does not advertise contrastive scoring")
        return ContrastiveOracle(base=oracle, contrast=oracle.contrast_view(), paired=oracle)
    raise ContractError(f"cannot build a contrastive view of {type(oracle).__name__}")
