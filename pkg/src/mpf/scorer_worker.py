"""Reference external scorer: wraps a local checkpoint behind the mpf-1
NDJSON protocol. Run as ``python -m mpf.scorer_worker <checkpoint-dir>``."""

from __future__ import annotations

import base64
import json
import sys

import numpy as np

from .encoder import DualEncoder
from .formats import tsr_from_bytes

PROTOCOL = "mpf-1"


def _reply(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def serve(ckpt_dir: str, stdin=None) -> int:
    encoder = DualEncoder.load(ckpt_dir)
    stdin = stdin if stdin is not None else sys.stdin
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            _reply({"id": None, "error": "malformed JSON"})
            continue
        op = msg.get("op")
        if op == "hello":
            _reply({"protocol": PROTOCOL, "grad": False})
        elif op == "score":
            try:
                images = np.stack(
                    [
                        tsr_from_bytes(base64.b64decode(blob))
                        for blob in msg["images"]
                    ]
                )
                sims = encoder.score_matrix(images, list(msg["captions"]))
                _reply({"id": msg.get("id"), "similarities": sims.tolist()})
            except Exception as e:  # report, keep serving
                _reply({"id": msg.get("id"), "error": f"{type(e).__name__}: {e}"})
        elif op == "shutdown":
            return 0
        else:
            _reply({"id": msg.get("id"), "error": f"unknown op {op!r}"})
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = argv if argv is not None else sys.argv[1:]
    if len(argv) != 1:
        print("usage: python -m mpf.scorer_worker <checkpoint-dir>", file=sys.stderr)
        return 2
    return serve(argv[0])


if __name__ == "__main__":
    raise SystemExit(main())
