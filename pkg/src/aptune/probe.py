"""Gate probing: dataset-averaged gate weights, heatmap export and variable
prefix lengths derived from them."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Example
from .gating import has_token_gate
from .transformer import ModelConfig


class NoGatesError(ValueError):
    pass


@dataclass
class GateReport:
    mean_alpha: np.ndarray  # [L, l]
    lam: np.ndarray  # [L]; 1.0 where the mode has no layer gate
    count: int
    dataset_id: str = ""
    checkpoint_id: str = ""

    @property
    def num_layers(self) -> int:
        return self.mean_alpha.shape[0]

    @property
    def prefix_len(self) -> int:
        return self.mean_alpha.shape[1]

    def merge(self, other: "GateReport") -> "GateReport":
        """Example-count-weighted average of two reports."""
        n = self.count + other.count
        mean = (self.mean_alpha * self.count + other.mean_alpha * other.count) / n
        return replace(self, mean_alpha=mean, count=n)


def collect_gates(
    model,
    examples: Sequence[Example],
    batch_size: int = 64,
    dataset_id: str = "",
    checkpoint_id: str = "",
) -> GateReport:
    """Average each layer's token gate over ``examples`` (no gradients recorded)."""
    from .training import iter_batches

    if not has_token_gate(model.mode):
        raise NoGatesError(f"checkpoint has no gates (mode {model.mode})")
    lengths = set(model.config.layer_prefix_lengths())
    if len(lengths) != 1:
        raise ValueError("gate probing needs a uniform prefix length across layers")
    if not examples:
        raise ValueError("gate probing needs at least one example")
    total = None
    for batch in iter_batches(examples, batch_size, model.task_kind):
        state = model.encode(batch)
        summed = np.stack([np.asarray(a, dtype=np.float64).sum(axis=0) for a in state.alphas])
        total = summed if total is None else total + summed
    lam = np.array(
        [1.0 if g.lam is None else float(g.lam.data[0]) for g in model.gates.layers], dtype=np.float64
    )
    return GateReport(total / len(examples), lam, len(examples), dataset_id, checkpoint_id)


@dataclass
class VariablePrefixPlan:
    lengths: list[int]
    tau: float
    source: str = ""

    def to_json(self) -> str:
        return json.dumps({"lengths": self.lengths, "tau": self.tau, "source": self.source}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "VariablePrefixPlan":
        obj = json.loads(text)
        return cls([int(n) for n in obj["lengths"]], float(obj["tau"]), str(obj.get("source", "")))


def derive_variable_lengths(report: GateReport, tau: float = 0.5, min_len: int = 1) -> VariablePrefixPlan:
    """Per layer, keep as many prefix tokens as have mean gate >= ``tau``
    (at least ``min_len``, at most the trained length)."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie strictly between 0 and 1")
    if min_len < 1:
        raise ValueError("min_len must be at least 1")
    full = report.prefix_len
    lengths = [
        int(min(full, max(min_len, int((row >= tau).sum())))) for row in report.mean_alpha
    ]
    source = f"{report.checkpoint_id}@{report.dataset_id}" if report.checkpoint_id or report.dataset_id else ""
    return VariablePrefixPlan(lengths, tau, source)


def build_pt2star_config(plan: VariablePrefixPlan, base: ModelConfig) -> ModelConfig:
    if len(plan.lengths) != base.num_layers:
        raise ValueError(f"plan has {len(plan.lengths)} layers, config has {base.num_layers}")
    cap = base.prefix_len
    if any(n > cap or n < 0 for n in plan.lengths):
        raise ValueError(f"plan lengths must lie in [0, {cap}]")
    return replace(base, mode="pt2_star", prefix_lengths=tuple(plan.lengths))


# ---------------------------------------------------------------------------
# export


def _companion(path: Path, suffix: str) -> Path:
    return path.with_name(f"{path.stem}{suffix}")


def export_heatmap(report: GateReport, path, svg: bool = True) -> list[Path]:
    """Write ``layer,token,mean_alpha`` CSV, a ``layer,lambda`` CSV next to it
    and optionally an SVG grid (darker = higher gate)."""
    path = Path(path)
    written = [path]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "token", "mean_alpha"])
        for i, row in enumerate(report.mean_alpha):
            for j, v in enumerate(row):
                w.writerow([i, j, f"{v:.17g}"])
    lam_path = _companion(path, "_lambda.csv")
    with lam_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "lambda"])
        for i, v in enumerate(report.lam):
            w.writerow([i, f"{v:.17g}"])
    written.append(lam_path)
    if svg:
        svg_path = path.with_suffix(".svg")
        svg_path.write_text(render_svg(report.mean_alpha))
        written.append(svg_path)
    return written


def read_heatmap(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return np.zeros((0, 0))
    layers = 1 + max(int(r["layer"]) for r in rows)
    tokens = 1 + max(int(r["token"]) for r in rows)
    out = np.full((layers, tokens), np.nan)
    for r in rows:
        out[int(r["layer"]), int(r["token"])] = float(r["mean_alpha"])
    return out


def gray_level(value: float) -> int:
    """0-255 gray for a gate value; 1.0 maps to 0 (darkest)."""
    v = min(1.0, max(0.0, float(value)))
    return int(round(255 * (1.0 - v)))


def render_svg(mean_alpha: np.ndarray, cell: int = 24) -> str:
    """Layers bottom-to-top (layer 0 at the bottom), prefix tokens left-to-right."""
    layers, tokens = mean_alpha.shape
    width, height = tokens * cell, layers * cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    ]
    for i in range(layers):
        y = (layers - 1 - i) * cell
        for j in range(tokens):
            g = gray_level(mean_alpha[i, j])
            parts.append(
                f'<rect x="{j * cell}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({g},{g},{g})" data-layer="{i}" data-token="{j}" '
                f'data-value="{mean_alpha[i, j]:.17g}"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
