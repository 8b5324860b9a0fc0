"""JSONL run histories: fixed line schema, lossless round-trip."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

from .objective import Observation


class HistoryError(ValueError):
    """Malformed history line or file."""


@dataclass
class HistoryRecord:
    """One serialized evaluation, in global trace order."""

    iter: int
    block_path: tuple[str, ...]
    config: dict[str, Any]
    loss: float | None
    reward: float | None
    cost_s: float
    fidelity: float
    status: str

    def to_line(self) -> str:
        payload = {
            "iter": self.iter,
            "block_path": list(self.block_path),
            "config": self.config,
            "loss": self.loss,
            "reward": self.reward,
            "cost_s": self.cost_s,
            "fidelity": self.fidelity,
            "status": self.status,
        }
        return json.dumps(payload)

    @classmethod
    def from_line(cls, line: str) -> "HistoryRecord":
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise HistoryError(f"invalid history line: {exc.msg}") from None
        missing = {"iter", "block_path", "config", "loss", "reward",
                   "cost_s", "fidelity", "status"} - set(payload)
        if missing:
            raise HistoryError(f"history line missing fields {sorted(missing)}")
        return cls(
            iter=int(payload["iter"]),
            block_path=tuple(payload["block_path"]),
            config=dict(payload["config"]),
            loss=payload["loss"],
            reward=payload["reward"],
            cost_s=float(payload["cost_s"]),
            fidelity=float(payload["fidelity"]),
            status=payload["status"],
        )

    @classmethod
    def from_observation(cls, obs: Observation, path: tuple[str, ...]) -> "HistoryRecord":
        return cls(
            iter=obs.index,
            block_path=tuple(path),
            config=dict(obs.config),
            loss=obs.loss,
            reward=obs.reward,
            cost_s=obs.cost,
            fidelity=obs.fidelity,
            status=obs.status,
        )


def write_history(path: str, records: list[HistoryRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_line() + "\n")


def read_history(path: str) -> list[HistoryRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(HistoryRecord.from_line(line))
    return records
