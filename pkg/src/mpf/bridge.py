"""Uniform scoring contract over the local model and external processes.

External scorers are child processes speaking newline-delimited JSON on
stdin/stdout: a ``{"op":"hello"}`` handshake answered by
``{"protocol":"mpf-1","grad":false}``, then ``score`` requests carrying
base64 TSR images. One request is in flight per child; pools of children
provide parallelism.
"""

from __future__ import annotations

import base64
import json
import shlex
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .encoder import DualEncoder
from .errors import BridgeError, ConfigError, ProtocolError, ShapeError
from .formats import tsr_bytes, tsr_from_bytes

PROTOCOL = "mpf-1"
HANDSHAKE_TIMEOUT = 10.0
SCORE_TIMEOUT = 120.0


def _validate_batch(images, captions) -> np.ndarray:
    if len(images) == 0 or len(captions) == 0:
        raise ShapeError("score_batch needs nonempty image and caption lists")
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if arr.shape[1:] != (3, 32, 32):
        raise ShapeError(f"images must be (3,32,32), got {arr.shape[1:]}")
    return arr


class LocalScorer:
    """In-process backend wrapping a checkpoint; exposes image gradients."""

    provides_image_gradients = True

    def __init__(self, encoder: DualEncoder, identity: str = "local"):
        self.encoder = encoder
        self.identity = identity

    @classmethod
    def from_checkpoint(cls, ckpt_dir) -> "LocalScorer":
        enc = DualEncoder.load(ckpt_dir)
        return cls(enc, identity=f"local:{ckpt_dir}")

    def score_batch(self, images, captions: list[str]) -> np.ndarray:
        arr = _validate_batch(images, captions)
        return self.encoder.score_matrix(arr, list(captions))

    def reset(self) -> None:
        pass

    def close(self) -> None:
        pass


class ExternalScorer:
    """Child process driven through the mpf-1 NDJSON protocol."""

    provides_image_gradients = False
    encoder = None

    def __init__(self, command: str, timeout: float = HANDSHAKE_TIMEOUT):
        self.command = command
        self.timeout = timeout
        self.identity = f"exec:{command}"
        self._next_id = 0
        self._pending: dict[int, dict] = {}
        self._proc: subprocess.Popen | None = None
        self._spawn()

    def _spawn(self) -> None:
        try:
            self._proc = subprocess.Popen(
                shlex.split(self.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as e:
            raise BridgeError(f"cannot spawn scorer {self.command!r}: {e}") from e
        self._pending.clear()
        reply = self._roundtrip({"op": "hello"}, self.timeout, match_id=None)
        if reply.get("protocol") != PROTOCOL:
            self.close()
            raise ProtocolError(f"bad handshake reply: {reply!r}")
        self.provides_image_gradients = bool(reply.get("grad", False))

    def _read_line(self, deadline: float) -> dict:
        proc = self._proc
        assert proc is not None and proc.stdout is not None
        line_holder: list[str | None] = []

        def read():
            line_holder.append(proc.stdout.readline())

        t = threading.Thread(target=read, daemon=True)
        t.start()
        t.join(max(0.0, deadline - time.monotonic()))
        if t.is_alive():
            self.close()
            raise BridgeError(f"scorer {self.command!r} timed out")
        line = line_holder[0]
        if not line:
            code = proc.poll()
            self.close()
            raise BridgeError(f"scorer {self.command!r} closed its pipe (exit={code})")
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as e:
            self.close()
            raise ProtocolError(f"scorer sent non-JSON line: {line[:200]!r}") from e
        if not isinstance(msg, dict):
            self.close()
            raise ProtocolError(f"scorer sent non-object message: {msg!r}")
        return msg

    def _roundtrip(self, request: dict, timeout: float, match_id: int | None) -> dict:
        proc = self._proc
        if proc is None or proc.poll() is not None:
            raise BridgeError(f"scorer {self.command!r} is not running")
        try:
            assert proc.stdin is not None
            proc.stdin.write(json.dumps(request) + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            self.close()
            raise BridgeError(f"scorer {self.command!r} pipe broke: {e}") from e
        deadline = time.monotonic() + timeout
        while True:
            if match_id is not None and match_id in self._pending:
                return self._pending.pop(match_id)
            msg = self._read_line(deadline)
            if match_id is None:
                return msg
            got = msg.get("id")
            if got == match_id:
                return msg
            if isinstance(got, int):
                # late response to an earlier id; keep it and read on
                self._pending[got] = msg
            else:
                self.close()
                raise ProtocolError(f"response without usable id: {msg!r}")

    def score_batch(self, images, captions: list[str]) -> np.ndarray:
        arr = _validate_batch(images, captions)
        req_id = self._next_id
        self._next_id += 1
        request = {
            "id": req_id,
            "op": "score",
            "images": [base64.b64encode(tsr_bytes(im)).decode("ascii") for im in arr],
            "captions": list(captions),
        }
        reply = self._roundtrip(request, SCORE_TIMEOUT, match_id=req_id)
        if "error" in reply:
            raise BridgeError(f"scorer error: {reply['error']}")
        sims = reply.get("similarities")
        if not isinstance(sims, list):
            self.close()
            raise ProtocolError(f"missing similarities in reply: {reply!r}")
        mat = np.asarray(sims, dtype=np.float64)
        if mat.shape != (len(images), len(captions)):
            self.close()
            raise ProtocolError(
                f"similarity matrix has shape {mat.shape}, "
                f"expected {(len(images), len(captions))}"
            )
        if not np.all(np.isfinite(mat)) or mat.min() < -1.0 or mat.max() > 1.0:
            self.close()
            raise ProtocolError("similarities outside [-1,1]")
        return mat

    def reset(self) -> None:
        self.close()
        self._spawn()

    def close(self) -> None:
        proc = self._proc
        if proc is None:
            return
        self._proc = None
        try:
            if proc.stdin:
                proc.stdin.close()
            proc.terminate()
            proc.wait(timeout=5.0)
        except (OSError, subprocess.TimeoutExpired):
            proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def spawn_external(command: str, timeout: float = HANDSHAKE_TIMEOUT) -> ExternalScorer:
    return ExternalScorer(command, timeout=timeout)


class ScorerPool:
    """Round-robin split of image batches over several single-request handles.

    Fitness order is preserved: chunk results are reassembled by index, so
    scheduling cannot change downstream results.
    """

    def __init__(self, handles):
        if not handles:
            raise ConfigError("scorer pool needs at least one handle")
        self.handles = list(handles)
        self.provides_image_gradients = all(
            h.provides_image_gradients for h in self.handles
        )
        self.encoder = getattr(self.handles[0], "encoder", None)
        self.identity = self.handles[0].identity

    def score_batch(self, images, captions: list[str]) -> np.ndarray:
        if len(self.handles) == 1 or len(images) == 1:
            return self.handles[0].score_batch(images, captions)
        chunks = np.array_split(np.arange(len(images)), len(self.handles))
        chunks = [c for c in chunks if len(c)]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [
                pool.submit(
                    self.handles[i].score_batch, [images[j] for j in chunk], captions
                )
                for i, chunk in enumerate(chunks)
            ]
            parts = [f.result() for f in futures]
        return np.concatenate(parts, axis=0)

    def reset(self) -> None:
        for h in self.handles:
            h.reset()

    def close(self) -> None:
        for h in self.handles:
            h.close()


def make_scorer(selector: str, workers: int = 1):
    """Build a scorer from a CLI selector: ``local:<ckpt>`` or ``exec:<cmd>``."""
    if selector.startswith("local:"):
        return LocalScorer.from_checkpoint(selector[len("local:") :])
    if selector.startswith("exec:"):
        command = selector[len("exec:") :]
        if workers > 1:
            return ScorerPool([spawn_external(command) for _ in range(workers)])
        return spawn_external(command)
    raise ConfigError(f"scorer selector must start with local: or exec:, got {selector!r}")
