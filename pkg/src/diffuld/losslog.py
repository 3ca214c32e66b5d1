"""Loss bookkeeping shared by the training stages."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite; ``state`` holds the last finite parameters."""

    def __init__(self, stage: str, iteration: int, state: dict):
        super().__init__(f"{stage}: non-finite loss at iteration {iteration}")
        self.stage = stage
        self.iteration = iteration
        self.state = state


@dataclass
class LossReport:
    records: list[tuple[int, str, str, float]] = field(default_factory=list)
    recluster_events: list[tuple[int, int]] = field(default_factory=list)  # (iteration, epoch)

    def log(self, iteration: int, stage: str, name: str, value: float) -> None:
        if not np.isfinite(value):
            raise ValueError(f"non-finite {name} at iteration {iteration}")
        self.records.append((iteration, stage, name, float(value)))

    def series(self, name: str, stage: str | None = None) -> np.ndarray:
        return np.array([v for _, s, n, v in self.records
                         if n == name and (stage is None or s == stage)])

    def write_jsonl(self, path) -> None:
        lines = [json.dumps({"iteration": i, "stage": s, "loss_name": n, "value": v})
                 for i, s, n, v in self.records]
        lines += [json.dumps({"iteration": i, "stage": "recluster", "loss_name": "epoch", "value": e})
                  for i, e in self.recluster_events]
        Path(path).write_text("".join(line + "\n" for line in lines))

    @classmethod
    def read_jsonl(cls, path) -> "LossReport":
        rep = cls()
        for line in Path(path).read_text().splitlines():
            r = json.loads(line)
            if r["stage"] == "recluster":
                rep.recluster_events.append((r["iteration"], int(r["value"])))
            else:
                rep.records.append((r["iteration"], r["stage"], r["loss_name"], r["value"]))
        return rep


def assert_finite_grads(module: torch.nn.Module) -> bool:
    return all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in module.parameters())


def trend_decreasing(values: np.ndarray, fraction: float = 0.1) -> bool:
    """Median of the last ``fraction`` below the median of the first ``fraction``."""
    n = max(1, int(len(values) * fraction))
    return float(np.median(values[-n:])) < float(np.median(values[:n]))
