"""Transferability of the patterns added in each learning-rate stage.

For stage ``i >= 2`` the transferability to a target is the target-accuracy
gain per unit of source-accuracy gain::

    (tacc_i - tacc_{i-1}) / (acc_i - acc_{i-1})

Accuracy CSV schema: header ``dataset,mode,stage,acc`` with ``mode`` in
``{fix, finetune}``, ``stage`` a 1-based integer and ``acc`` a percentage.
The source dataset appears like any other row; its ratios are 1 by definition.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad
from .errors import DegenerateStageError, DimensionError, ParseError, ValidationError
from .ps10 import Subset
from .trainer import Constant, TrainConfig, fit_arrays, predict

__all__ = [
    "MODES",
    "StageAccuracies",
    "TransferabilityReport",
    "transferability",
    "read_accuracies",
    "compute_table",
    "compute_report",
    "snapshot_transfer",
    "reference_accuracies",
]

MODES = ("finetune", "fix")
CSV_COLUMNS = ["dataset", "mode", "stage", "acc"]


@dataclass
class StageAccuracies:
    """Per-stage source accuracies and, per ``(target, mode)``, target accuracies (percent)."""

    source_acc: list[float]
    target_tacc: dict[tuple[str, str], list[float]] = field(default_factory=dict)
    source: str = "source"
    flags: dict[tuple[str, str], str] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.source_acc)
        for key, vals in self.target_tacc.items():
            if len(vals) != n:
                raise ValidationError(f"{key}: {len(vals)} stages, source has {n}")
        for v in [*self.source_acc, *(x for vals in self.target_tacc.values() for x in vals)]:
            if not 0.0 <= v <= 100.0:
                raise ValidationError(f"accuracy {v} outside [0, 100]")

    @property
    def num_stages(self) -> int:
        return len(self.source_acc)


def transferability(accs: StageAccuracies, target: str, mode: str, stage_i: int) -> float:
    if stage_i < 2 or stage_i > accs.num_stages:
        raise ValidationError(f"stage must lie in [2, {accs.num_stages}], got {stage_i}")
    try:
        tacc = accs.target_tacc[(target, mode)]
    except KeyError:
        raise ValidationError(f"no accuracies for target {target!r} in mode {mode!r}") from None
    d_src = accs.source_acc[stage_i - 1] - accs.source_acc[stage_i - 2]
    if d_src == 0:
        raise DegenerateStageError(
            f"source accuracy unchanged between stages {stage_i - 1} and {stage_i}"
        )
    return (tacc[stage_i - 1] - tacc[stage_i - 2]) / d_src


@dataclass
class TransferabilityReport:
    """One entry per ``(target, mode, stage >= 2)``; ``ratio`` is ``None`` when degenerate."""

    entries: list[dict]
    accuracies: dict[str, StageAccuracies]

    def get(self, target: str, mode: str, stage: int):
        for e in self.entries:
            if (e["target"], e["mode"], e["stage"]) == (target, mode, stage):
                return e
        raise KeyError((target, mode, stage))

    def ratio(self, target: str, mode: str, stage: int):
        return self.get(target, mode, stage)["ratio"]

    def to_dict(self) -> dict:
        return {"entries": self.entries}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_markdown(self) -> str:
        """Markdown table of accuracies with bold ratios between stages."""
        if not self.accuracies:
            return ""
        modes = [m for m in MODES if m in self.accuracies]
        n = max(a.num_stages for a in self.accuracies.values())
        head = []
        for m in modes:
            for s in range(1, n + 1):
                head.append(f"{m} stage{s}")
                if s >= 2:
                    head.append(f"**{m} stage{s}**")
        lines = ["| Dataset | " + " | ".join(head) + " |", "|---" * (len(head) + 1) + "|"]
        targets = []
        for acc in self.accuracies.values():
            for t, _ in acc.target_tacc:
                if t not in targets:
                    targets.append(t)
        for t in targets:
            cells = []
            for m in modes:
                acc = self.accuracies[m]
                vals = acc.target_tacc.get((t, m))
                for s in range(1, n + 1):
                    cells.append("" if vals is None else f"{vals[s - 1]:.2f}")
                    if s >= 2:
                        try:
                            r = self.ratio(t, m, s)
                            cells.append("degenerate" if r is None else f"**{r:.2f}**")
                        except KeyError:
                            cells.append("")
            lines.append(f"| {t} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def stage_ordering(self) -> dict:
        """Per (target, mode), whether ratios decrease with stage (reported, not enforced)."""
        out = {}
        keys = sorted({(e["target"], e["mode"]) for e in self.entries})
        for key in keys:
            rs = [e["ratio"] for e in self.entries if (e["target"], e["mode"]) == key]
            if any(r is None for r in rs):
                out[key] = None
            else:
                out[key] = all(b < a for a, b in zip(rs, rs[1:]))
        return out


def compute_report(per_mode: dict[str, StageAccuracies]) -> TransferabilityReport:
    entries = []
    for mode, accs in per_mode.items():
        for (target, m), _ in accs.target_tacc.items():
            if m != mode:
                continue
            for stage in range(2, accs.num_stages + 1):
                entry = {"target": target, "mode": mode, "stage": stage, "ratio": None, "degenerate": False}
                try:
                    entry["ratio"] = transferability(accs, target, mode, stage)
                except DegenerateStageError:
                    entry["degenerate"] = True
                entries.append(entry)
    return TransferabilityReport(entries=entries, accuracies=per_mode)


def read_accuracies(source, source_name: str | None = None) -> dict[str, StageAccuracies]:
    """Parse the accuracy CSV into one :class:`StageAccuracies` per mode."""
    if isinstance(source, (str, Path)) and Path(source).exists():
        text = Path(source).read_text()
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty accuracy file", row=1) from None
    header = [h.strip() for h in header]
    if header != CSV_COLUMNS:
        raise ParseError(f"header must be {','.join(CSV_COLUMNS)}, got {','.join(header)}", row=1)

    table: dict[tuple[str, str], dict[int, float]] = {}
    order: list[str] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise ParseError(f"expected 4 fields, got {len(row)}", row=lineno)
        dataset, mode, stage_s, acc_s = (c.strip() for c in row)
        if not dataset:
            raise ParseError("empty dataset name", row=lineno, column="dataset")
        if mode not in MODES:
            raise ParseError(f"mode must be one of {MODES}, got {mode!r}", row=lineno, column="mode")
        try:
            stage = int(stage_s)
        except ValueError:
            raise ParseError(f"stage {stage_s!r} is not an integer", row=lineno, column="stage") from None
        if stage < 1:
            raise ParseError("stage must be >= 1", row=lineno, column="stage")
        try:
            acc = float(acc_s)
        except ValueError:
            raise ParseError(f"acc {acc_s!r} is not a number", row=lineno, column="acc") from None
        if not (math.isfinite(acc) and 0.0 <= acc <= 100.0):
            raise ParseError(f"acc {acc} outside [0, 100]", row=lineno, column="acc")
        cell = table.setdefault((dataset, mode), {})
        if stage in cell:
            raise ParseError(f"duplicate stage {stage} for {dataset}/{mode}", row=lineno, column="stage")
        cell[stage] = acc
        if dataset not in order:
            order.append(dataset)

    if not table:
        raise ParseError("no data rows", row=2)
    src = source_name or order[0]
    if not any(d == src for d, _ in table):
        raise ParseError(f"source dataset {src!r} not present")

    per_mode = {}
    for mode in MODES:
        keys = [k for k in table if k[1] == mode]
        if not keys:
            continue
        src_cells = table.get((src, mode))
        if src_cells is None:
            other = [table[k] for k in table if k[0] == src]
            src_cells = other[0]
        n = len(src_cells)
        if sorted(src_cells) != list(range(1, n + 1)):
            raise ParseError(f"source {src!r} stages must be 1..{n}", column="stage")
        targets = {}
        for dataset, m in keys:
            cells = table[(dataset, m)]
            if sorted(cells) != list(range(1, n + 1)):
                raise ParseError(f"{dataset}/{m} must list stages 1..{n}", column="stage")
            targets[(dataset, m)] = [cells[s] for s in range(1, n + 1)]
        per_mode[mode] = StageAccuracies(
            source_acc=[src_cells[s] for s in range(1, n + 1)], target_tacc=targets, source=src
        )
    return per_mode


def compute_table(csv_of_accuracies, source_name: str | None = None) -> TransferabilityReport:
    return compute_report(read_accuracies(csv_of_accuracies, source_name))


def reference_accuracies() -> Path:
    """Path of the bundled accuracy table for the ImageNet ResNet-50 snapshots."""
    return Path(__file__).with_name("data") / "reference_accuracies.csv"


def _percent(pred, labels) -> float:
    return float(np.mean(pred == labels) * 100.0)


def _fit_head(features, labels, eval_features, eval_labels, num_classes, epochs, lr, seed):
    head = ndgrad.MlpConfig(
        input_dim=features.shape[1], hidden_dims=(), num_classes=num_classes, init_seed=seed
    )
    cfg = TrainConfig(schedule=Constant(lr), epochs=epochs, optimizer="gd", seed=seed)
    run = fit_arrays(head, features, labels, cfg)
    return _percent(predict(head, run.final_params, eval_features), eval_labels)


def snapshot_transfer(
    run,
    model: ndgrad.MlpConfig,
    source_data,
    target_data,
    mode: str,
    source_eval=None,
    target_eval=None,
    head_epochs: int = 100,
    head_lr: float = 0.1,
    finetune_cfg: TrainConfig | None = None,
    include_initial: bool = False,
    target_name: str = "target",
) -> StageAccuracies:
    """Transfer every stage snapshot of ``run`` to ``target_data``.

    ``fix`` retrains only a fresh linear head on the frozen hidden features;
    ``finetune`` retrains all parameters from the snapshot (with a fresh head).
    Accuracies are measured on ``source_eval`` / ``target_eval`` (default: the
    training sets) over clean examples, in percent.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}")
    if len(run.snapshots) < 2 and not include_initial:
        raise ValidationError("need at least two stage snapshots")
    for data in (source_data, target_data):
        if data.features.shape[1] != model.input_dim:
            raise DimensionError(
                f"model expects {model.input_dim} inputs, dataset provides {data.features.shape[1]}"
            )
    source_eval = source_data if source_eval is None else source_eval
    target_eval = target_data if target_eval is None else target_eval

    def clean(data):
        keep = data.subsets != Subset.NOISE
        return data.features[keep], data.labels[keep]

    sx, sy = clean(source_eval)
    tx, ty = clean(target_data)
    ex, ey = clean(target_eval)
    classes = np.unique(np.concatenate([ty, ey]))
    key = (target_name, mode)

    params_list = [s.params for s in run.snapshots]
    if include_initial:
        params_list = [run.initial_params, *params_list]

    source_acc, tacc = [], []
    flags = {}
    for i, params in enumerate(params_list):
        source_acc.append(_percent(predict(model, params, sx), sy))
        if classes.size < 2:
            tacc.append(100.0)
            flags[key] = "single-class target"
            continue
        num_classes = max(model.num_classes, int(classes.max()) + 1)
        if mode == "fix":
            f_train = ndgrad.hidden_features(model, params, tx)
            f_eval = ndgrad.hidden_features(model, params, ex)
            tacc.append(_fit_head(f_train, ty, f_eval, ey, num_classes, head_epochs, head_lr, seed=i))
        else:
            cfg = finetune_cfg or TrainConfig(schedule=Constant(0.05), epochs=50, batch_size=32, seed=i)
            tuned = ndgrad.MlpConfig(
                model.input_dim, model.hidden_dims, num_classes, model.activation, model.init_seed + 1000 + i
            )
            init = ndgrad.init_params(tuned)
            body = slice(0, ndgrad.head_slice(tuned).start)
            init[body] = np.asarray(params)[: body.stop]
            result = fit_arrays(tuned, tx, ty, cfg, init_params=init)
            tacc.append(_percent(predict(tuned, result.final_params, ex), ey))
    return StageAccuracies(source_acc=source_acc, target_tacc={key: tacc}, source="source", flags=flags)
