"""Region scorers: the boundary where a classifier network would plug in.

A scorer maps ``(scene_id, regions)`` to an ``(R, n + 1)`` array of
per-class probabilities followed by a background entry, with classes in the
model's lexicographic order.

External scorers speak newline-delimited JSON over the child's standard
streams. The engine first sends ``{"classes": [...]}``, then one request
per line::

    {"seq": 3, "scene_id": "000005", "regions": [[x0, y0, x1, y1], ...]}

and expects exactly one response line per request, in order::

    {"seq": 3, "scores": [[p_0, ..., p_{n-1}, p_bg], ...]}
"""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import shlex
import subprocess
import threading
from typing import Mapping, Protocol, Sequence

import numpy as np

from .dataset import Scene
from .geometry import iou_matrix

logger = logging.getLogger(__name__)

ORACLE_IOU_KNEE = 0.25
ORACLE_LOW_SLOPE = 0.05


class ScorerError(RuntimeError):
    """The scorer could not produce scores for a request."""


class Scorer(Protocol):
    classes: list[str]
    exclusive: bool

    def score(self, scene_id: str, regions: np.ndarray) -> np.ndarray: ...


def calibrate_iou(iou: np.ndarray) -> np.ndarray:
    return np.where(iou >= ORACLE_IOU_KNEE, iou, ORACLE_LOW_SLOPE * iou)


_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & _M64
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
        x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
        return x ^ (x >> np.uint64(31))


def _stable_key(*parts) -> np.uint64:
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return np.uint64(int.from_bytes(digest, "little"))


def hashed_normals(key: np.uint64, regions: np.ndarray, n_classes: int) -> np.ndarray:
    """Standard normals that depend only on ``key``, region coordinates and class."""
    bits = np.ascontiguousarray(regions, dtype=np.float64).view(np.uint64)
    h = np.full(len(regions), key, dtype=np.uint64)
    for k in range(bits.shape[1]):
        h = _splitmix64(h ^ bits[:, k])
    cls = np.arange(n_classes, dtype=np.uint64)
    h1 = _splitmix64(h[:, None] ^ (cls[None, :] * np.uint64(2) + np.uint64(1)))
    h2 = _splitmix64(h1)
    u1 = ((h1 >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0 ** 53
    u2 = (h2 >> np.uint64(11)).astype(np.float64) / 2.0 ** 53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class OracleScorer:
    """Test double that scores regions from ground-truth overlap.

    The class score is the best calibrated IoU with a ground-truth object of
    that class (IoU itself above 0.25, ``0.05 * IoU`` below), plus Gaussian
    noise of scale ``noise_sigma`` clipped to [0, 1]. Noise is a pure
    function of ``(seed, scene_id, region, class)``.
    """

    exclusive = False

    def __init__(self, scenes: Sequence[Scene] | Mapping[str, Scene], classes: Sequence[str],
                 noise_sigma: float = 0.0, seed: int = 0):
        if noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        self.scenes = dict(scenes) if isinstance(scenes, Mapping) else {s.scene_id: s for s in scenes}
        self.classes = list(classes)
        self.noise_sigma = noise_sigma
        self.seed = seed
        self._cidx = {c: i for i, c in enumerate(self.classes)}

    def score(self, scene_id: str, regions: np.ndarray) -> np.ndarray:
        regions = np.asarray(regions, dtype=float).reshape(-1, 4)
        n = len(self.classes)
        out = np.zeros((len(regions), n + 1))
        scene = self.scenes.get(scene_id)
        if scene is None:
            raise ScorerError(f"oracle has no ground truth for scene {scene_id!r}")
        if len(regions) == 0:
            return out
        objs = [o for o in scene.objects if o.class_label in self._cidx]
        if objs:
            gt = np.array([o.box.as_tuple() for o in objs])
            cal = calibrate_iou(iou_matrix(regions, gt))
            labels = np.array([self._cidx[o.class_label] for o in objs])
            for c in np.unique(labels):
                out[:, c] = cal[:, labels == c].max(axis=1)
        if self.noise_sigma > 0:
            noise = hashed_normals(_stable_key(self.seed, scene_id), regions, n)
            out[:, :n] = np.clip(out[:, :n] + self.noise_sigma * noise, 0.0, 1.0)
        out[:, n] = 1.0 - out[:, :n].max(axis=1)
        return out


class ExternalScorer:
    """Scorer backed by a child process speaking the line protocol.

    The child is started lazily and restarted on the next request after a
    failure, so one crashed scene does not poison later scenes.
    """

    exclusive = True

    def __init__(self, command: str | Sequence[str], classes: Sequence[str], timeout: float = 30.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("empty scorer command")
        self.classes = list(classes)
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue | None = None
        self._seq = 0
        self._lock = threading.Lock()

    def _start(self):
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, encoding="utf-8", bufsize=1)
        except OSError as exc:
            self._proc = None
            raise ScorerError(f"cannot start scorer {self.command!r}: {exc}") from None
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self._proc, self._lines), daemon=True).start()
        self._send({"classes": self.classes})

    @staticmethod
    def _pump(proc: subprocess.Popen, lines: queue.Queue):
        for line in proc.stdout:
            lines.put(line)
        lines.put(None)

    def _send(self, obj):
        try:
            self._proc.stdin.write(json.dumps(obj) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as exc:
            self._fail(f"scorer stdin closed: {exc}")

    def _fail(self, message: str):
        self.close()
        raise ScorerError(message)

    def score(self, scene_id: str, regions: np.ndarray) -> np.ndarray:
        regions = np.asarray(regions, dtype=float).reshape(-1, 4)
        with self._lock:
            if self._proc is None or self._proc.poll() is not None:
                self.close()
                self._start()
            self._seq += 1
            seq = self._seq
            self._send({"seq": seq, "scene_id": scene_id, "regions": regions.tolist()})
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                self._fail(f"scorer timed out after {self.timeout}s on seq {seq}")
            if line is None:
                code = self._proc.wait()
                self._fail(f"scorer exited with code {code} during seq {seq}")
            logger.debug("scorer seq %d: %d regions", seq, len(regions))
            try:
                resp = json.loads(line)
                scores = np.asarray(resp["scores"], dtype=float)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                self._fail(f"malformed scorer response for seq {seq}: {exc!r}")
            if resp.get("seq") != seq:
                self._fail(f"scorer answered seq {resp.get('seq')!r}, expected {seq}")
            expected = (len(regions), len(self.classes) + 1)
            if len(regions) == 0 and scores.size == 0:
                return np.zeros(expected)
            if scores.shape != expected:
                self._fail(f"scorer returned shape {scores.shape}, expected {expected}")
            if not np.all((scores >= 0) & (scores <= 1)):
                self._fail(f"scorer returned probabilities outside [0, 1] for seq {seq}")
            return scores

    def close(self):
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            if proc.stdin:
                proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=2)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
