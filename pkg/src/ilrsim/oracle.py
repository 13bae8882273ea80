"""Black-box classifier oracle contract and backends.

The optimizer and evaluator only ever see per-label confidence scores, so
any recognition model can attach here: the bundled logistic-regression
backend runs in-process, and arbitrary external models connect over a
newline-delimited JSON protocol (child process stdio, or TCP).

Wire protocol:
    server -> client on connect:  {"type": "hello", "labels": ["stop", ...]}
    client -> server:             {"id": <u64>, "width": <u32>, "height": <u32>,
                                   "pixels": "<base64 raw RGB8 row-major>"}
    server -> client:             {"id": <u64>, "scores": {"stop": 0.91, ...}}
    errors:                       {"id": <u64>, "error": "<message>"}
"""

from __future__ import annotations

import base64
import json
import queue
import socket
import subprocess
import threading
from dataclasses import dataclass

import numpy as np

from . import classifier
from .imaging import Raster, resize_bilinear, quantize_u8


class OracleError(Exception):
    """Oracle unavailable, protocol violation, or malformed response."""


@dataclass(frozen=True)
class ScoreVector:
    """Ordered label -> confidence map with a deterministic argmax."""

    scores: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if not self.scores:
            raise OracleError("empty score vector")
        for label, s in self.scores:
            if not 0.0 <= s <= 1.0:
                raise OracleError(f"score for {label!r} out of [0,1]: {s}")

    @property
    def top_label(self) -> str:
        best = max(s for _, s in self.scores)
        return min(label for label, s in self.scores if s == best)

    def score(self, label: str) -> float:
        for lbl, s in self.scores:
            if lbl == label:
                return s
        return 0.0

    def as_dict(self) -> dict[str, float]:
        return dict(self.scores)


@dataclass(frozen=True)
class RoiNoise:
    """First-stage bounding-box displacement level: box translation drawn
    from U(-delta, delta) as a fraction of box width/height."""

    delta: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.delta < 0.5:
            raise OracleError(f"displacement level must be in [0, 0.5), got {self.delta}")


def crop_roi(
    img: Raster,
    roi: tuple[int, int, int, int],
    noise: RoiNoise = RoiNoise(0.0),
    rng_seed: int = 0,
    out_px: int = classifier.INPUT_PX,
) -> Raster:
    """Crop a (possibly displaced) ROI and resize it to the classifier
    input resolution with bilinear sampling."""
    x0, y0, x1, y1 = roi
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise OracleError(f"degenerate roi {roi}")
    if noise.delta > 0:
        rng = np.random.default_rng(rng_seed)
        u = rng.uniform(-noise.delta, noise.delta)
        v = rng.uniform(-noise.delta, noise.delta)
        dx = int(round(u * w))
        dy = int(round(v * h))
        x0, x1 = x0 + dx, x1 + dx
        y0, y1 = y0 + dy, y1 + dy
    x0 = max(0, x0)
    y0 = max(0, y0)
    x1 = min(img.width, x1)
    y1 = min(img.height, y1)
    if x1 <= x0 or y1 <= y0:
        raise OracleError("displaced roi left the image")
    region = img.as_float()[y0:y1, x0:x1]
    resized = quantize_u8(resize_bilinear(region, out_px, out_px))
    out_scale = img.scale * out_px / w
    return Raster(pixels=resized, scale=out_scale)


class BuiltinOracle:
    """In-process backend over the bundled classifier weights.

    classify() accepts any image size and resizes internally; a batch entry
    point over pre-shaped inputs is provided for mask-heavy callers.
    """

    def __init__(self, params: classifier.ClassifierParams):
        self.params = params

    @property
    def labels(self) -> tuple[str, ...]:
        return self.params.labels

    def classify(self, img: Raster) -> ScoreVector:
        if (img.height, img.width) != (classifier.INPUT_PX, classifier.INPUT_PX):
            resized = quantize_u8(
                resize_bilinear(img.as_float(), classifier.INPUT_PX, classifier.INPUT_PX)
            )
            img = Raster(pixels=resized, scale=img.scale)
        feats = classifier.features_from_input(img)
        probs = classifier.predict_scores(self.params, feats[None, :])[0]
        return ScoreVector(scores=tuple(zip(self.params.labels, map(float, probs))))

    def classify_batch(self, inputs: np.ndarray) -> np.ndarray:
        """(N, 60, 60, 3) float batch -> (N, n_classes) softmax scores."""
        feats = classifier.features_batch(np.asarray(inputs, dtype=np.float64))
        return classifier.predict_scores(self.params, feats)

    def close(self) -> None:
        pass


class RoiCroppingOracle:
    """Two-stage front end: crops a fixed ROI (optionally with displacement
    noise) before delegating to the wrapped classifier oracle."""

    def __init__(self, inner, roi, noise: RoiNoise = RoiNoise(0.0), rng_seed: int = 0):
        self.inner = inner
        self.roi = roi
        self.noise = noise
        self.rng_seed = rng_seed
        self._calls = 0

    @property
    def labels(self):
        return self.inner.labels

    def classify(self, img: Raster) -> ScoreVector:
        # Each call gets a fresh child seed so trial loops see independent
        # draws while the whole sequence stays reproducible.
        if self.noise.delta > 0:
            seed = int(np.random.SeedSequence((self.rng_seed, self._calls)).generate_state(1)[0])
            self._calls += 1
        else:
            seed = 0
        crop = crop_roi(img, self.roi, self.noise, rng_seed=seed)
        return self.inner.classify(crop)

    def close(self) -> None:
        pass


class _LineTransport:
    """Background-reader line transport over a subprocess or TCP socket."""

    def __init__(self, proc=None, sock=None):
        self._proc = proc
        self._sock = sock
        self._queue: queue.Queue = queue.Queue()
        if proc is not None:
            self._reader = threading.Thread(
                target=self._read_pipe, args=(proc.stdout,), daemon=True
            )
        else:
            self._reader = threading.Thread(target=self._read_sock, daemon=True)
        self._reader.start()

    def _read_pipe(self, pipe):
        try:
            for line in pipe:
                self._queue.put(line)
        except Exception:
            pass
        self._queue.put(None)

    def _read_sock(self):
        buf = b""
        try:
            while True:
                chunk = self._sock.recv(65536)
                if not chunk:
                    break
                buf += chunk
                while b"\n" in buf:
                    line, buf = buf.split(b"\n", 1)
                    self._queue.put(line.decode("utf-8"))
        except Exception:
            pass
        self._queue.put(None)

    def send_line(self, line: str) -> None:
        data = (line + "\n").encode("utf-8")
        if self._proc is not None:
            self._proc.stdin.write(data)
            self._proc.stdin.flush()
        else:
            self._sock.sendall(data)

    def recv_line(self, timeout: float) -> str:
        try:
            line = self._queue.get(timeout=timeout)
        except queue.Empty:
            raise OracleError(f"oracle response timed out after {timeout} s")
        if line is None:
            raise OracleError("oracle connection closed")
        return line

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except Exception:
                pass
            try:
                self._proc.wait(timeout=2)
            except Exception:
                self._proc.kill()
        if self._sock is not None:
            try:
                self._sock.close()
            except Exception:
                pass


class ExternalOracle:
    """Client for the NDJSON classify protocol; one request in flight per
    connection, serialized by an internal lock."""

    def __init__(self, transport: _LineTransport, timeout: float = 5.0):
        self._transport = transport
        self._timeout = timeout
        self._lock = threading.Lock()
        self._next_id = 0
        hello_raw = transport.recv_line(timeout)
        try:
            hello = json.loads(hello_raw)
        except json.JSONDecodeError as exc:
            raise OracleError(f"bad hello message: {hello_raw!r}") from exc
        if hello.get("type") != "hello" or "labels" not in hello:
            raise OracleError(f"protocol violation in hello: {hello!r}")
        labels = hello["labels"]
        if not labels:
            raise OracleError("oracle advertised an empty label list")
        self.labels = tuple(labels)

    def classify(self, img: Raster) -> ScoreVector:
        with self._lock:
            req_id = self._next_id
            self._next_id += 1
            payload = {
                "id": req_id,
                "width": img.width,
                "height": img.height,
                "pixels": base64.b64encode(img.pixels.tobytes(order="C")).decode("ascii"),
            }
            self._transport.send_line(json.dumps(payload))
            raw = self._transport.recv_line(self._timeout)
        try:
            resp = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise OracleError(f"malformed oracle response: {raw!r}") from exc
        if resp.get("id") != req_id:
            raise OracleError(f"response id {resp.get('id')} does not match request {req_id}")
        if "error" in resp:
            raise OracleError(f"oracle error: {resp['error']}")
        if "scores" not in resp or not isinstance(resp["scores"], dict):
            raise OracleError(f"protocol violation: no scores in {resp!r}")
        got = resp["scores"]
        scores = tuple((label, float(got.get(label, 0.0))) for label in self.labels)
        return ScoreVector(scores=scores)

    def close(self) -> None:
        self._transport.close()


def external_oracle_connect(endpoint, timeout: float = 5.0) -> ExternalOracle:
    """Connect to an external oracle.

    `endpoint` is either an argv list (child process over stdio) or a
    "tcp:host:port" address string.
    """
    if isinstance(endpoint, str) and endpoint.startswith("tcp:"):
        _, host, port = endpoint.split(":", 2)
        try:
            sock = socket.create_connection((host, int(port)), timeout=timeout)
            sock.settimeout(timeout)
        except OSError as exc:
            raise OracleError(f"cannot connect to {endpoint}: {exc}") from exc
        transport = _LineTransport(sock=sock)
    else:
        argv = endpoint if isinstance(endpoint, (list, tuple)) else str(endpoint).split()
        try:
            proc = subprocess.Popen(
                list(argv),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
        except OSError as exc:
            raise OracleError(f"cannot spawn oracle process {argv}: {exc}") from exc
        transport = _LineTransport(proc=proc)
    return ExternalOracle(transport, timeout=timeout)
