"""Sweep-CSV parsing with strict column validation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

# Exact column contract of the simulator's sweep CSVs.
SWEEP_COLUMNS = [
    "sweep_var",
    "value",
    "attainment",
    "attainment_text",
    "attainment_image",
    "attainment_search",
    "attainment_file",
    "rounds",
    "preemptions",
    "mean_block_s",
    "max_block_s",
]


@dataclass(frozen=True)
class SweepFrame:
    """Rows of one sweep CSV, sorted by sweep value."""

    path: str
    sweep_var: str
    values: tuple[float, ...]
    attainments: tuple[float, ...]

    @property
    def label(self) -> str:
        return Path(self.path).stem

    @classmethod
    def load(cls, path: str) -> "SweepFrame":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            missing = [c for c in SWEEP_COLUMNS if c not in fields]
            extra = [c for c in fields if c not in SWEEP_COLUMNS]
            if missing or extra:
                parts = []
                if missing:
                    parts.append(f"missing column(s) {missing}")
                if extra:
                    parts.append(f"unexpected column(s) {extra}")
                raise ValueError(f"{path}: {'; '.join(parts)}")
            rows = list(reader)
        if not rows:
            raise ValueError(f"{path}: sweep CSV has no data rows")
        svars = {r["sweep_var"] for r in rows}
        if len(svars) != 1:
            raise ValueError(f"{path}: mixed sweep_var values {sorted(svars)}")
        parsed = sorted(
            ((float(r["value"]), float(r["attainment"])) for r in rows),
            key=lambda t: t[0],
        )
        return cls(
            path=path,
            sweep_var=svars.pop(),
            values=tuple(v for v, _ in parsed),
            attainments=tuple(a for _, a in parsed),
        )

    def goodput(self, target: float) -> float | None:
        """Largest sweep value whose attainment meets the target."""
        meeting = [v for v, a in zip(self.values, self.attainments) if a >= target]
        return max(meeting) if meeting else None
