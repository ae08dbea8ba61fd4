import json
from collections.abc import Sequence
from pathlib import Path

import numpy as np

PGM_MAX_GRAY = 255


def append_jsonl(path: Path, record: dict[str, object]) -> None:
    """Append one record as a single sorted-key JSON line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict[str, object]]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def to_gray_levels(values: np.ndarray) -> np.ndarray:
    """
    Rescale a grid to integer gray levels in [0, 255].

    A constant grid maps to mid-gray.

    Example:

        >>> to_gray_levels(np.array([[0.0, 1.0], [0.5, 1.0]])).tolist()
        [[0, 255], [128, 255]]
    """
    grid = np.asarray(values, dtype=np.float64)
    low, high = float(grid.min()), float(grid.max())
    if high - low <= 0.0:
        return np.full(grid.shape, (PGM_MAX_GRAY + 1) // 2, dtype=np.int64)
    return np.floor((grid - low) / (high - low) * PGM_MAX_GRAY + 0.5).astype(np.int64)


def write_pgm(path: Path, values: np.ndarray) -> None:
    """Write a 2-D grid as a plain-text (P2) portable graymap."""
    if values.ndim != 2:
        raise ValueError(f"a graymap needs a 2-D grid, got shape {values.shape}")
    levels = to_gray_levels(values)
    height, width = levels.shape
    lines = ["P2", f"{width} {height}", str(PGM_MAX_GRAY)]
    lines += [" ".join(str(int(v)) for v in row) for row in levels]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def format_table(headers: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    """
    Render a Markdown table; floats are printed with two decimals.

    Example:

        >>> print(format_table(["cell", "R@1"], [["a", 12.5]]))
        | cell | R@1 |
        | --- | --- |
        | a | 12.50 |
    """

    def render(value: object) -> str:
        if isinstance(value, float):
            return f"{value:.2f}"
        return str(value)

    lines = [
        "| " + " | ".join(headers) + " |",
        "| " + " | ".join("---" for _ in headers) + " |",
    ]
    lines += ["| " + " | ".join(render(v) for v in row) + " |" for row in rows]
    return "\n".join(lines)
