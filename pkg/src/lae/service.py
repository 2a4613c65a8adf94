"""Queue-backed HTTP service for human mask annotation.

Candidates exported by the active-learning step are served as tasks; a
browser client paints binary masks and posts them back run-length
encoded. Every mutation is persisted to disk before it is acknowledged,
so a crash loses nothing. Mutations are serialized through one lock;
reads are safe concurrently.

Wire format for masks: ``{"width": W, "height": H, "runs": [...]}`` with
alternating run lengths over the row-major grid, starting with value 0.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .active import CandidateSet, load_candidates

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# run-length mask codec

def rle_encode(mask: np.ndarray) -> dict:
    """Binary (H, W) grid -> run-length payload (runs start with value 0)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    flat = (mask.reshape(-1) > 0).astype(np.int8)
    runs: list[int] = []
    if flat.size:
        edges = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate([[0], edges, [flat.size]])
        lengths = np.diff(bounds).tolist()
        if flat[0] == 1:
            runs.append(0)  # leading zero-run so runs always start at value 0
        runs.extend(int(v) for v in lengths)
    return {"width": int(mask.shape[1]), "height": int(mask.shape[0]),
            "runs": runs}


def rle_decode(payload: dict) -> np.ndarray:
    """Run-length payload -> binary uint8 (H, W) grid."""
    try:
        width = int(payload["width"])
        height = int(payload["height"])
        runs = payload["runs"]
    except (KeyError, TypeError) as e:
        raise ValueError(f"malformed run-length payload: {e}") from e
    total = sum(int(r) for r in runs)
    if total != width * height:
        raise ValueError(f"run lengths sum to {total}, expected "
                         f"{width * height} for {width}x{height}")
    flat = np.zeros(width * height, dtype=np.uint8)
    pos = 0
    value = 0
    for run in runs:
        run = int(run)
        if run < 0:
            raise ValueError("negative run length")
        if value:
            flat[pos:pos + run] = 1
        pos += run
        value ^= 1
    return flat.reshape(height, width)


# ---------------------------------------------------------------------------
# service state

class ServiceState:
    """Task table + submission history, persisted after every mutation."""

    def __init__(self, candidates: CandidateSet, images_dir: Path,
                 state_path: Path):
        self.images_dir = Path(images_dir)
        self.state_path = Path(state_path)
        self.lock = threading.Lock()
        self.tasks: dict[str, dict] = {}
        self.submissions: list[dict] = []
        for cid, score in candidates.entries:
            self.tasks[cid] = {"id": cid, "score": score, "status": "pending",
                               "mask": None, "submitted_at": None}
        if self.state_path.exists():
            self._load()

    def _load(self) -> None:
        try:
            saved = json.loads(self.state_path.read_text())
            tasks = saved["tasks"]
            submissions = saved["submissions"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise RuntimeError(
                f"corrupt service state file {self.state_path}: {e}") from e
        for cid, task in tasks.items():
            if cid in self.tasks:
                self.tasks[cid] = task
        self.submissions = submissions

    def _persist(self) -> None:
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"tasks": self.tasks,
                                   "submissions": self.submissions},
                                  sort_keys=True))
        tmp.replace(self.state_path)

    def image_path(self, cid: str) -> Path:
        return self.images_dir / f"{cid}.png"

    def image_size(self, cid: str) -> tuple[int, int]:
        from PIL import Image
        with Image.open(self.image_path(cid)) as im:
            return im.height, im.width

    def list_tasks(self) -> list[dict]:
        with self.lock:
            tasks = sorted(self.tasks.values(),
                           key=lambda t: (-t["score"], t["id"]))
            return json.loads(json.dumps(tasks))

    def counts(self) -> dict:
        with self.lock:
            pending = sum(1 for t in self.tasks.values()
                          if t["status"] == "pending")
            return {"pending": pending,
                    "annotated": len(self.tasks) - pending,
                    "total": len(self.tasks)}

    def submit(self, cid: str, payload: dict) -> dict:
        if cid not in self.tasks:
            raise KeyError(cid)
        h, w = self.image_size(cid)
        mask = rle_decode(payload)  # validates run lengths
        if mask.shape != (h, w):
            raise ValueError(f"mask is {payload['height']}x{payload['width']}, "
                             f"image is {h}x{w}")
        with self.lock:
            self.submissions.append({"id": cid, "seq": len(self.submissions)})
            previous = self.tasks[cid]["status"]
            self.tasks[cid]["mask"] = rle_encode(mask)  # canonical form
            self.tasks[cid]["status"] = "annotated"
            self.tasks[cid]["submitted_at"] = len(self.submissions)
            self._persist()
        log.info("mask submitted for %s (was %s)", cid, previous)
        return {"id": cid, "status": "annotated"}


def replay_submissions(candidates: CandidateSet,
                       submissions: list[tuple[str, dict]]) -> dict[str, dict]:
    """Fold a submission history into the task table it would produce."""
    tasks = {cid: {"id": cid, "score": score, "status": "pending", "mask": None}
             for cid, score in candidates.entries}
    for cid, payload in submissions:
        if cid in tasks:
            tasks[cid]["mask"] = rle_encode(rle_decode(payload))
            tasks[cid]["status"] = "annotated"
    return tasks


# ---------------------------------------------------------------------------
# HTTP layer

class _Handler(BaseHTTPRequestHandler):
    state: ServiceState
    static_dir: Path | None = None

    def log_message(self, fmt, *args):  # route through logging, not stderr
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send_json(self, obj, code: int = 200) -> None:
        body = json.dumps(obj).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        if parts == ["api", "tasks"]:
            self._send_json({"tasks": self.state.list_tasks()})
        elif parts == ["api", "status"]:
            self._send_json(self.state.counts())
        elif len(parts) == 4 and parts[:2] == ["api", "tasks"] \
                and parts[3] == "image":
            self._send_image(parts[2])
        else:
            self._send_static(parts)

    def _send_image(self, cid: str) -> None:
        if cid not in self.state.tasks:
            self._send_json({"error": f"unknown task {cid}"}, 404)
            return
        data = self.state.image_path(cid).read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _send_static(self, parts: list[str]) -> None:
        if self.static_dir is None:
            self._send_json({"error": "not found"}, 404)
            return
        rel = "/".join(parts) if parts else "index.html"
        path = (self.static_dir / rel).resolve()
        if not str(path).startswith(str(self.static_dir.resolve())) \
                or not path.is_file():
            self._send_json({"error": "not found"}, 404)
            return
        types = {".html": "text/html", ".js": "text/javascript",
                 ".css": "text/css", ".png": "image/png", ".svg": "image/svg+xml"}
        data = path.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type",
                         types.get(path.suffix, "application/octet-stream"))
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self):
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        if len(parts) != 4 or parts[:2] != ["api", "tasks"] or parts[3] != "mask":
            self._send_json({"error": "not found"}, 404)
            return
        cid = parts[2]
        length = int(self.headers.get("Content-Length", 0))
        try:
            payload = json.loads(self.rfile.read(length))
        except json.JSONDecodeError:
            self._send_json({"error": "body must be JSON"}, 400)
            return
        try:
            self._send_json(self.state.submit(cid, payload))
        except KeyError:
            self._send_json({"error": f"unknown task {cid}"}, 404)
        except ValueError as e:
            h, w = self.state.image_size(cid)
            self._send_json({"error": str(e),
                             "expected": {"height": h, "width": w}}, 400)


class AnnotationService:
    """Embeddable HTTP service; ``serve_forever`` runs in a daemon thread."""

    def __init__(self, candidates_path: Path | str, images_dir: Path | str,
                 state_path: Path | str, port: int = 0,
                 static_dir: Path | str | None = None):
        candidates_path = Path(candidates_path)
        if not candidates_path.exists():
            raise FileNotFoundError(
                f"candidate export file not found: {candidates_path}")
        candidates = load_candidates(candidates_path)
        self.state = ServiceState(candidates, Path(images_dir), Path(state_path))

        handler = type("BoundHandler", (_Handler,), {
            "state": self.state,
            "static_dir": Path(static_dir) if static_dir else None,
        })
        self.server = ThreadingHTTPServer(("127.0.0.1", port), handler)
        self.port = self.server.server_address[1]
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self) -> "AnnotationService":
        self._thread = threading.Thread(target=self.server.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        log.info("annotation service listening on %s", self.base_url)
        self.server.serve_forever()
