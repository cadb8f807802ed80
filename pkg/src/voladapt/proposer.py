"""Host side of the MP1 proposer protocol.

A proposer is any child process speaking newline-delimited UTF-8 JSON on its
standard streams. First line from the child is the hello record
``{"proto":"MP1","name":...,"caps":["box_prompt"]}``; after that the host
sends request lines and the child answers with response or error lines,
possibly out of order. ``{"cmd":"bye"}`` shuts the child down.

Requests carry the slice intensities as base64 of little-endian float32
bytes so framing stays line-based.
"""

from __future__ import annotations

import base64
import json
import queue
import subprocess
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .rle import decode_rle
from .volume import BBox2D, SliceMask2D

PROTO = "MP1"
DEFAULT_TIMEOUT = 30.0
DEFAULT_WINDOW = 32


class ProposerError(RuntimeError):
    """Base class for protocol and transport failures."""


class SpawnError(ProposerError):
    pass


class HelloError(ProposerError):
    """Malformed or missing hello line; carries the captured line."""

    def __init__(self, message: str, line: str = ""):
        super().__init__(message)
        self.line = line


class VersionMismatchError(HelloError):
    pass


class ProposerExitError(ProposerError):
    pass


class ProposerTimeoutError(ProposerError):
    pass


class MalformedResponseError(ProposerError):
    pass


class RequestFailedError(ProposerError):
    """Per-request error record returned by the proposer."""

    def __init__(self, request_id: int, message: str):
        super().__init__(f"request {request_id}: {message}")
        self.request_id = request_id


@dataclass(frozen=True)
class ProposalRequest:
    request_id: int
    case_id: str
    slice_index: int
    bbox: BBox2D
    image: np.ndarray  # (H, W) float32

    def to_line(self) -> str:
        img = np.ascontiguousarray(self.image, dtype="<f4")
        h, w = img.shape
        rec = {
            "id": self.request_id,
            "case": self.case_id,
            "slice": self.slice_index,
            "bbox": self.bbox.as_list(),
            "h": h,
            "w": w,
            "img_b64": base64.b64encode(img.tobytes()).decode("ascii"),
        }
        return json.dumps(rec, separators=(",", ":"))


@dataclass(frozen=True)
class ProposalResponse:
    request_id: int
    mask: SliceMask2D
    confidence: float


def decode_request_line(line: str) -> ProposalRequest:
    """Parse a request line (used by proposer implementations and tests)."""
    rec = json.loads(line)
    h, w = int(rec["h"]), int(rec["w"])
    raw = base64.b64decode(rec["img_b64"])
    img = np.frombuffer(raw, dtype="<f4").reshape(h, w)
    r0, r1, c0, c1 = rec["bbox"]
    return ProposalRequest(
        request_id=int(rec["id"]),
        case_id=str(rec["case"]),
        slice_index=int(rec["slice"]),
        bbox=BBox2D(r0, r1, c0, c1),
        image=img,
    )


class ProposerSession:
    """One child process; serializes writes, demultiplexes reads by id."""

    def __init__(self, command: Sequence[str], timeout: float = DEFAULT_TIMEOUT,
                 window: int = DEFAULT_WINDOW):
        self.timeout = timeout
        self.window = window
        self.name: Optional[str] = None
        self.caps: List[str] = []
        self._next_id = 0
        self._write_lock = threading.Lock()
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()
        try:
            self._proc = subprocess.Popen(
                list(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as e:
            raise SpawnError(f"cannot spawn proposer {command!r}: {e}") from e
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        self._handshake()

    # -- transport ----------------------------------------------------------

    def _read_loop(self):
        for line in self._proc.stdout:
            self._lines.put(line.rstrip("\n"))
        self._lines.put(None)

    def _next_line(self) -> str:
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise ProposerTimeoutError(f"no response within {self.timeout}s") from None
        if line is None:
            raise ProposerExitError(
                f"proposer exited (code {self._proc.poll()}) with requests outstanding"
            )
        return line

    def _send(self, line: str):
        with self._write_lock:
            if self._proc.poll() is not None:
                raise ProposerExitError(f"proposer already exited (code {self._proc.poll()})")
            try:
                self._proc.stdin.write(line + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as e:
                raise ProposerExitError(f"write to proposer failed: {e}") from e

    def _handshake(self):
        line = self._next_line()
        try:
            hello = json.loads(line)
        except json.JSONDecodeError:
            self.close(send_bye=False)
            raise HelloError(f"hello line is not JSON: {line!r}", line)
        proto = hello.get("proto")
        if proto != PROTO:
            self.close(send_bye=False)
            raise VersionMismatchError(f"proposer speaks {proto!r}, expected {PROTO!r}", line)
        self.name = hello.get("name")
        self.caps = list(hello.get("caps", []))

    # -- requests -----------------------------------------------------------

    def new_request_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def _parse_response(self, line: str) -> Union[ProposalResponse, RequestFailedError]:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            raise MalformedResponseError(f"response line is not JSON: {line!r}") from None
        if "id" not in rec:
            raise MalformedResponseError(f"response without id: {line!r}")
        rid = int(rec["id"])
        if "error" in rec:
            return RequestFailedError(rid, str(rec["error"]))
        if "rle" not in rec or "conf" not in rec:
            raise MalformedResponseError(f"response missing rle/conf: {line!r}")
        return rid, rec  # type: ignore[return-value]

    def _finish_response(self, rid: int, rec: dict,
                         shapes: Dict[int, tuple]) -> ProposalResponse:
        if rid not in shapes:
            raise MalformedResponseError(f"response for unknown id {rid}")
        h, w = shapes[rid]
        mask = decode_rle(rec["rle"], h, w)
        conf = float(rec["conf"])
        if not 0.0 <= conf <= 1.0:
            raise MalformedResponseError(f"confidence {conf} out of [0, 1]")
        return ProposalResponse(rid, mask, conf)

    def propose(self, req: ProposalRequest) -> ProposalResponse:
        return self.propose_many([req])[0]

    def propose_many(self, reqs: Sequence[ProposalRequest]) -> List[ProposalResponse]:
        """Pipelined send with a bounded window; responses may arrive out of
        order and are re-matched by id. Results come back in request order."""
        pending: Dict[int, tuple] = {r.request_id: r.image.shape for r in reqs}
        if len(pending) != len(reqs):
            raise ValueError("duplicate request ids")
        results: Dict[int, ProposalResponse] = {}
        it = iter(reqs)
        in_flight = 0
        sent_all = False
        while len(results) < len(reqs):
            while not sent_all and in_flight < self.window:
                try:
                    r = next(it)
                except StopIteration:
                    sent_all = True
                    break
                self._send(r.to_line())
                in_flight += 1
            parsed = self._parse_response(self._next_line())
            in_flight -= 1
            if isinstance(parsed, RequestFailedError):
                raise parsed
            rid, rec = parsed
            results[rid] = self._finish_response(rid, rec, pending)
        return [results[r.request_id] for r in reqs]

    def close(self, send_bye: bool = True):
        if self._proc.poll() is None:
            if send_bye:
                try:
                    self._send(json.dumps({"cmd": "bye"}))
                except ProposerError:
                    pass
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
