"""Active annotation pipeline: channel-concept probe, channel ranking,
candidate selection, and mask providers.

The probe is a logistic model on the encoder's pooled channel means that
predicts how likely an image is to be fake (targets are 1 - label, so
positive weights mark forgery-indicative channels). Fake images with the
highest total activation on the top-ranked channels are the candidates
sent for pixel-wise mask annotation.
"""

from __future__ import annotations

import json
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class ChannelProbe:
    weights: np.ndarray  # (d_c,)
    bias: float
    train_accuracy: float


@dataclass
class CandidateSet:
    entries: list[tuple[str, float]]           # (image id, score), descending
    n_active: int
    status: dict[str, str] = field(default_factory=dict)  # id -> pending/annotated

    def __post_init__(self):
        for cid, _ in self.entries:
            self.status.setdefault(cid, "pending")

    def ids(self) -> list[str]:
        return [cid for cid, _ in self.entries]

    def mark_annotated(self, cid: str) -> None:
        if cid not in self.status:
            raise KeyError(f"unknown candidate id {cid!r}")
        self.status[cid] = "annotated"

    def export(self, path: Path | str) -> Path:
        path = Path(path)
        with open(path, "w") as f:
            for cid, score in self.entries:
                f.write(json.dumps({"id": cid, "score": score,
                                    "status": self.status[cid]},
                                   sort_keys=True) + "\n")
        return path


def load_candidates(path: Path | str) -> CandidateSet:
    entries = []
    status = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            entries.append((obj["id"], float(obj["score"])))
            status[obj["id"]] = obj.get("status", "pending")
    return CandidateSet(entries=entries, n_active=len(entries), status=status)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    return np.where(t >= 0, 1.0 / (1.0 + np.exp(-t)),
                    np.exp(t) / (1.0 + np.exp(t)))


def fit_channel_probe(features: np.ndarray, labels: np.ndarray,
                      epochs: int = 5, lr: float = 1e-3,
                      seed: int = 0) -> ChannelProbe:
    """Logistic regression on pooled channel features, plain per-sample SGD.

    ``labels`` follow the dataset convention (1 = true); the probe's target
    is fakeness, i.e. 1 - label. Minimizes the negative log-likelihood.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError("features must be (n, d_c) with one label per row")
    if len(np.unique(labels)) < 2:
        raise ValueError("probe fitting needs both classes present")

    targets = 1.0 - labels.astype(np.float64)
    n, d = features.shape
    w = np.zeros(d)
    b = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        for i in rng.permutation(n):
            p = _sigmoid(w @ features[i] + b)
            g = p - targets[i]
            w -= lr * g * features[i]
            b -= lr * g

    pred_fake = _sigmoid(features @ w + b) > 0.5
    acc = float(np.mean(pred_fake == (targets > 0.5)))
    return ChannelProbe(weights=w, bias=float(b), train_accuracy=acc)


def top_channels(probe: ChannelProbe, k: int) -> list[int]:
    """Indices of the k largest signed weights, descending; ties -> lower index."""
    d = probe.weights.shape[0]
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    order = sorted(range(d), key=lambda i: (-probe.weights[i], i))
    return order[:k]


def channel_scores(gap_vectors: np.ndarray, channels: list[int]) -> np.ndarray:
    """Per-image score: sum of pooled activations over the selected channels."""
    return np.asarray(gap_vectors)[:, channels].sum(axis=1)


def select_candidates(ids: list[str], gap_vectors: np.ndarray,
                      channels: list[int], n_active: int) -> CandidateSet:
    """Top-``n_active`` fake images by selected-channel activation.

    Descending score; score ties break toward the smaller id. Input order
    does not affect the result.
    """
    if len(ids) == 0:
        raise ValueError("candidate pool is empty")
    if n_active > len(ids):
        raise ValueError(f"n_active={n_active} exceeds pool size {len(ids)}")
    scores = channel_scores(gap_vectors, channels)
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    entries = [(ids[i], float(scores[i])) for i in order[:n_active]]
    return CandidateSet(entries=entries, n_active=n_active)


# ---------------------------------------------------------------------------
# mask providers

class AnnotationTimeout(RuntimeError):
    def __init__(self, pending: list[str]):
        super().__init__(f"{len(pending)} candidates still pending: {pending[:5]}")
        self.pending = pending


class OracleMaskProvider:
    """Serves the generator's ground-truth masks directly."""

    def __init__(self, masks: dict[str, np.ndarray]):
        self._masks = masks

    def fetch(self, ids: list[str]) -> tuple[dict[str, np.ndarray], list[str]]:
        got = {i: self._masks[i] for i in ids if i in self._masks}
        pending = [i for i in ids if i not in self._masks]
        return got, pending


class DirectoryMaskProvider:
    """Reads ``<dir>/<id>.png`` binary masks; missing files stay pending."""

    def __init__(self, directory: Path | str):
        self.directory = Path(directory)

    def fetch(self, ids: list[str]) -> tuple[dict[str, np.ndarray], list[str]]:
        got, pending = {}, []
        for cid in ids:
            path = self.directory / f"{cid}.png"
            if path.exists():
                arr = np.asarray(Image.open(path).convert("L"))
                got[cid] = (arr > 127).astype(np.float32)
            else:
                pending.append(cid)
        return got, pending


class ServiceMaskProvider:
    """Polls the annotation service until all candidates are annotated
    or the timeout elapses, then pulls the submitted masks."""

    def __init__(self, base_url: str, poll_interval: float = 0.5,
                 timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.poll_interval = poll_interval
        self.timeout = timeout

    def _get(self, route: str) -> dict:
        with urllib.request.urlopen(self.base_url + route) as resp:
            return json.loads(resp.read())

    def fetch(self, ids: list[str]) -> tuple[dict[str, np.ndarray], list[str]]:
        from .service import rle_decode

        deadline = time.monotonic() + self.timeout
        while True:
            status = self._get("/api/status")
            if status["pending"] == 0 or time.monotonic() >= deadline:
                break
            time.sleep(self.poll_interval)

        tasks = {t["id"]: t for t in self._get("/api/tasks")["tasks"]}
        got, pending = {}, []
        for cid in ids:
            task = tasks.get(cid)
            if task and task["status"] == "annotated":
                got[cid] = rle_decode(task["mask"]).astype(np.float32)
            else:
                pending.append(cid)
        return got, pending


def annotation_targets(candidates: CandidateSet, provider
                       ) -> tuple[dict[str, np.ndarray], list[str]]:
    """Fetch masks for every candidate; marks the fetched ones annotated.

    Returns (masks by id, pending ids). Never mutates images.
    """
    masks, pending = provider.fetch(candidates.ids())
    for cid in masks:
        candidates.mark_annotated(cid)
    return masks, pending
