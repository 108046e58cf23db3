"""Run records: a complete, reproducible account of one sampling run.

A record snapshots the config, logs one entry per outer step (per-cycle
entries for recurrence live inside the step), counts model calls, and
hashes its own content. Wall time is excluded from the hash so repeated
runs of the same seed compare hash-equal.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class StepRecord:
    t: int
    stage: str
    w_semantic: float
    w_preference: float
    l_semantic: float | None = None
    l_preference: float | None = None
    grad_norm: float | None = None
    r_t: int = 0
    step_magnitude: float | None = None
    rel_change: float | None = None
    events: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    prompt: str
    seed: int
    config: dict
    graph: dict | None = None
    steps: list[StepRecord] = field(default_factory=list)
    denoiser_calls: int = 0
    scorer_calls: int = 0
    wall_time_s: float = 0.0
    status: str = "running"  # running | completed | diverged
    error: str | None = None
    image_path: str | None = None
    # clean-prediction snapshots {"t": int, "image": nested list}, captured on
    # the first pass of evenly spaced steps when the config asks for them
    snapshots: list[dict] = field(default_factory=list)

    @property
    def nfe(self) -> int:
        return self.denoiser_calls

    def expected_denoiser_calls(self) -> int:
        """The accounting identity: one call group per cycle, (1 + r_t) per step."""
        return sum(1 + s.r_t for s in self.steps)

    def to_dict(self, include_wall_time: bool = True) -> dict:
        data = {
            "prompt": self.prompt,
            "seed": self.seed,
            "config": self.config,
            "graph": self.graph,
            "steps": [s.to_dict() for s in self.steps],
            "denoiser_calls": self.denoiser_calls,
            "scorer_calls": self.scorer_calls,
            "status": self.status,
            "error": self.error,
            "image_path": self.image_path,
            "snapshots": self.snapshots,
        }
        if include_wall_time:
            data["wall_time_s"] = self.wall_time_s
        return data

    def content_hash(self) -> str:
        """SHA-256 over everything that should be seed-reproducible.

        Wall time and on-disk path vary between repeats of the same run,
        so both stay out of the hash.
        """
        data = self.to_dict(include_wall_time=False)
        data.pop("image_path")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = self.to_dict()
        data["content_hash"] = self.content_hash()
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(data, indent=2, sort_keys=True))
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        data = json.loads(Path(path).read_text())
        steps = [StepRecord(**s) for s in data.pop("steps")]
        data.pop("content_hash", None)
        rec = cls(steps=steps, **data)
        return rec


def image_hash(image: np.ndarray) -> str:
    """SHA-256 of the raw float32 pixel buffer (C-contiguous)."""
    arr = np.ascontiguousarray(image, dtype=np.float32)
    return hashlib.sha256(arr.tobytes()).hexdigest()
