"""
Ablation grid over masking strategies and batch-grouping strategies.

Every cell trains from the same seed for the same number of epochs; only
the named axis changes. The report is descriptive: no ordering between cells
is asserted.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from src.config import GroupingConfig, MaskingStrategy, TrainConfig
from src.dependencies import RunDir
from src.errors import SyncMaskError
from src.training import pretrain, steps_per_epoch
from src.utils import format_table

logger = logging.getLogger(__name__)

Axis = Literal["masking", "grouping"]
AXES: tuple[Axis, ...] = ("masking", "grouping")

REPORT_HEADERS = ["axis", "cell", "status", "I2T R@1", "T2I R@1", "visible mask fraction"]


@dataclass(frozen=True)
class AblationCell:
    axis: Axis
    name: str
    config: TrainConfig


@dataclass(frozen=True)
class AblationRow:
    axis: Axis
    name: str
    status: Literal["ok", "failed"]
    i2t_r1: float = float("nan")
    t2i_r1: float = float("nan")
    visible_mask_fraction: float = float("nan")
    error: str = ""

    def as_table_row(self) -> list[object]:
        return [
            self.axis,
            self.name,
            self.status,
            self.i2t_r1,
            self.t2i_r1,
            self.visible_mask_fraction,
        ]

    def as_record(self) -> dict[str, object]:
        """JSON-ready fields; metrics a failed cell never produced become ``None``."""
        return {
            name: None if isinstance(value, float) and math.isnan(value) else value
            for name, value in asdict(self).items()
        }


def masking_cells(base: TrainConfig) -> list[AblationCell]:
    """Random/attentional masking per modality: four cells."""
    combos = [
        ("Rt+Rv", "random", "random"),
        ("At+Rv", "attentional", "random"),
        ("Rt+Av", "random", "attentional"),
        ("At+Av", "attentional", "attentional"),
    ]
    return [
        AblationCell(
            "masking",
            name,
            base.model_copy(update={"masking": MaskingStrategy(text=text, image=image)}),
        )
        for name, text, image in combos
    ]


def grouping_cells(base: TrainConfig) -> list[AblationCell]:
    """Random batches, hardest with and without false-negative exclusion, semi-hard with it."""
    grouping = base.grouping.model_dump()
    variants = [
        ("random", {"strategy": "random", "efn": False}),
        ("hardest", {"strategy": "hardest", "efn": False}),
        ("hardest+efn", {"strategy": "hardest", "efn": True}),
        (f"semihard(s={base.grouping.s})+efn", {"strategy": "semihard", "efn": True}),
    ]
    return [
        AblationCell(
            "grouping",
            name,
            base.model_copy(
                update={"grouping": GroupingConfig.model_validate({**grouping, **changes})}
            ),
        )
        for name, changes in variants
    ]


def ablation_cells(base: TrainConfig, axes: list[Axis] | tuple[Axis, ...] = AXES) -> list[AblationCell]:
    cells: list[AblationCell] = []
    for axis in axes:
        if axis == "masking":
            cells += masking_cells(base)
        elif axis == "grouping":
            cells += grouping_cells(base)
        else:
            raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    return cells


def run_cell(cell: AblationCell, run_dir: RunDir | None = None) -> AblationRow:
    """Train one cell; a training failure yields a ``failed`` row instead of raising."""
    logger.info(f"Ablation cell {cell.axis}/{cell.name}: training")
    try:
        result = pretrain(cell.config, run_dir)
    except (SyncMaskError, ArithmeticError, ValueError) as e:
        logger.error(f"Ablation cell {cell.axis}/{cell.name} failed: {e}")
        return AblationRow(cell.axis, cell.name, "failed", error=str(e))
    final = result.retrieval[-1]
    last_epoch = result.metrics[-steps_per_epoch(cell.config) :]
    return AblationRow(
        axis=cell.axis,
        name=cell.name,
        status="ok",
        i2t_r1=final.i2t.get(1, float("nan")),
        t2i_r1=final.t2i.get(1, float("nan")),
        visible_mask_fraction=float(np.mean([m.visible_mask_fraction for m in last_epoch])),
    )


def run_ablation(
    base: TrainConfig,
    axes: list[Axis] | tuple[Axis, ...] = AXES,
    output_dir: Path | None = None,
) -> list[AblationRow]:
    """
    Train every cell of the requested axes and write the comparison report.

    Args:
        base: configuration shared by all cells
        axes: any of ``masking`` and ``grouping``
        output_dir: where ``ablation.md`` and ``ablation.jsonl`` are written,
            with one run directory per cell below it

    Returns:
        One row per cell, in axis then cell order
    """
    rows: list[AblationRow] = []
    for cell in ablation_cells(base, axes):
        cell_dir = None
        if output_dir is not None:
            slug = cell.name.replace("+", "_").replace("(", "_").replace(")", "").replace("=", "")
            cell_dir = RunDir(output_dir / f"{cell.axis}_{slug}")
        rows.append(run_cell(cell, cell_dir))

    if output_dir is not None:
        write_report(rows, output_dir)
    return rows


def write_report(rows: list[AblationRow], output_dir: Path) -> Path:
    output_dir.mkdir(parents=True, exist_ok=True)
    table = format_table(REPORT_HEADERS, [row.as_table_row() for row in rows])
    report_path = output_dir / "ablation.md"
    report_path.write_text(table + "\n")
    with open(output_dir / "ablation.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row.as_record(), sort_keys=True, allow_nan=False) + "\n")
    logger.info(f"Ablation report with {len(rows)} rows written to {report_path}")
    return report_path

