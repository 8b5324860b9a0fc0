#!/usr/bin/env python3
"""Regenerate the bundled assets (space file and toy CSVs). Deterministic."""

from __future__ import annotations

import csv
import json
import math
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from volcano.objective import pipeline_space  # noqa: E402
from volcano.space import space_to_dict  # noqa: E402

ASSETS = os.path.join(os.path.dirname(__file__), "..", "src", "volcano", "assets")


def write_space_file() -> None:
    doc = space_to_dict(pipeline_space())
    with open(os.path.join(ASSETS, "pipeline_small.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def write_csv(name: str, X: np.ndarray, labels: list[str]) -> None:
    with open(os.path.join(ASSETS, name), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x1", "x2", "label"])
        for row, label in zip(X, labels):
            writer.writerow([f"{row[0]:.6f}", f"{row[1]:.6f}", label])


def make_blobs() -> None:
    """Two well-separated Gaussian blobs: linearly separable, 200 rows."""
    rng = np.random.default_rng(20240612)
    n = 100
    a = rng.normal(loc=(-2.0, -2.0), scale=0.7, size=(n, 2))
    b = rng.normal(loc=(2.0, 2.0), scale=0.7, size=(n, 2))
    X = np.vstack([a, b])
    labels = ["neg"] * n + ["pos"] * n
    order = rng.permutation(2 * n)
    write_csv("toy_blobs.csv", X[order], [labels[i] for i in order])


def make_moons() -> None:
    """Two interleaved half-circles with noise: nonlinear, 400 rows."""
    rng = np.random.default_rng(20240613)
    n = 200
    t1 = rng.random(n) * math.pi
    t2 = rng.random(n) * math.pi
    upper = np.stack([np.cos(t1), np.sin(t1)], axis=1)
    lower = np.stack([1.0 - np.cos(t2), 0.5 - np.sin(t2)], axis=1)
    X = np.vstack([upper, lower]) + rng.normal(scale=0.12, size=(2 * n, 2))
    labels = ["up"] * n + ["down"] * n
    order = rng.permutation(2 * n)
    write_csv("toy_moons.csv", X[order], [labels[i] for i in order])


if __name__ == "__main__":
    os.makedirs(ASSETS, exist_ok=True)
    write_space_file()
    make_blobs()
    make_moons()
    print("assets written to", os.path.abspath(ASSETS))
