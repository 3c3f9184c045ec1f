"""Ablation grids over distillation transfers, pre-training scenarios and model capacity."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import SubjectTFR, TFRDataset
from .report import REFERENCE_RESULTS, summarize
from .training import TrainConfig, distill_target, pretrain_source

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RowSpec:
    name: str
    table: str  # "kd", "scenario-student" or "scenario-teacher"
    role: str  # model whose held-out metrics the row reports
    pretrain: str | None  # None, "single" (one source channel) or "multi" (all source channels)
    kd: tuple[bool, bool, bool] | None  # (output, filterbank, lstm); None: no teacher in the loop
    capacity: str = "4C"
    source_domain: str = ""
    target_domain: str = ""

    @property
    def transfers(self) -> list[str]:
        if not self.kd:
            return []
        return [n for n, on in zip(("output", "filterbank", "lstm"), self.kd) if on]

    def run_key(self) -> tuple:
        kd = self.kd if self.kd and any(self.kd) else None
        return (self.role if kd is None else "distill", self.pretrain, kd, self.capacity)


def _kd_row(name, kd):
    return RowSpec(f"kd:{name}", "kd", "student", "multi", kd, "4C", "Multi-Channel", "Multi-Channel")


KD_ROWS = [
    _kd_row("output+filterbank+lstm", (True, True, True)),
    _kd_row("output", (True, False, False)),
    _kd_row("filterbank", (False, True, False)),
    _kd_row("lstm", (False, False, True)),
    _kd_row("none", (False, False, False)),
]
SCENARIO_STUDENT_ROWS = [
    RowSpec("Baseline-1C", "scenario-student", "student", None, None, "1C", "No", "Single-Channel"),
    RowSpec("CDSC", "scenario-student", "student", "single", None, "1C", "Single-Channel", "Single-Channel"),
    RowSpec("CDSC+CDCC", "scenario-student", "student", "multi", None, "4C", "Multi-Channel", "Single-Channel"),
    RowSpec("CDSC+CDCC+SDSC+SDCC", "scenario-student", "student", "multi", (True, True, True), "4C",
            "Multi-Channel", "Multi-Channel"),
]
SCENARIO_TEACHER_ROWS = [
    RowSpec("Teacher:Baseline", "scenario-teacher", "teacher", None, None, "4C", "No", "Multi-Channel"),
    RowSpec("Teacher:CDSC+CDCC", "scenario-teacher", "teacher", "multi", None, "4C", "Multi-Channel", "Multi-Channel"),
]
ALL_ROWS = {r.name: r for r in KD_ROWS + SCENARIO_STUDENT_ROWS + SCENARIO_TEACHER_ROWS}
GRIDS = {
    "kd": KD_ROWS,
    "scenarios": SCENARIO_STUDENT_ROWS + SCENARIO_TEACHER_ROWS,
    "scenarios_student": SCENARIO_STUDENT_ROWS,
    "all": KD_ROWS + SCENARIO_STUDENT_ROWS + SCENARIO_TEACHER_ROWS,
}
# held-out student accuracy must not decrease along this chain
ORDERING_CHAIN = ("Baseline-1C", "CDSC", "CDSC+CDCC+SDSC+SDCC")
MIN_MARGIN = 0.02


@dataclass
class AblationRow:
    spec: RowSpec
    runs: list[dict] = field(default_factory=list)  # {seed, fold, acc, mf1, kappa}
    status: str = "ok"
    error: str | None = None
    seconds: float = 0.0

    def stat(self, key: str) -> tuple[float, float]:
        return summarize([r[key] for r in self.runs]) if self.runs else (float("nan"), float("nan"))

    def seed_means(self, key: str = "acc") -> dict[int, float]:
        out: dict[int, list[float]] = {}
        for r in self.runs:
            out.setdefault(r["seed"], []).append(r[key])
        return {s: float(np.mean(v)) for s, v in out.items()}

    def to_dict(self) -> dict:
        d = {"spec": asdict(self.spec), "transfers": self.spec.transfers, "status": self.status,
             "error": self.error, "runs": self.runs, "seconds": self.seconds}
        for k in ("acc", "mf1", "kappa"):
            m, s = self.stat(k)
            d[k] = {"mean": m, "std": s}
        return d


@dataclass
class AblationGrid:
    rows: list[AblationRow]
    seeds: list[int]
    ordering: dict = field(default_factory=dict)

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.spec.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "rows": {r.spec.name: r.to_dict() for r in self.rows},
                "ordering": self.ordering, "reference": REFERENCE_RESULTS}


def with_single_slot_views(ds: TFRDataset, mapping: dict[str, str]) -> TFRDataset:
    """Add views holding only slot 0 of existing views (for 1-channel capacity models)."""
    subjects = {}
    for sid, s in ds.subjects.items():
        views = dict(s.views)
        for new, src in mapping.items():
            if src in views:
                views[new] = np.ascontiguousarray(views[src][..., :1])
        subjects[sid] = SubjectTFR(sid, views, s.labels, s.epoch_index)
    return TFRDataset(ds.domain, subjects, ds.stft)


def ordering_check(grid: AblationGrid, chain: Sequence[str] = ORDERING_CHAIN, margin: float = MIN_MARGIN) -> dict:
    names = [r.spec.name for r in grid.rows if r.status == "ok"]
    if not all(c in names for c in chain):
        return {"chain": list(chain), "evaluated": False}
    means = [grid.row(c).stat("acc")[0] for c in chain]
    out = {
        "chain": list(chain),
        "evaluated": True,
        "means": dict(zip(chain, means)),
        "non_decreasing": all(a <= b for a, b in zip(means, means[1:])),
        "margin": means[-1] - means[0],
        "required_margin": margin,
    }
    out["holds"] = out["non_decreasing"] and out["margin"] >= margin
    student_rows = [r.spec.name for r in grid.rows if r.spec.table == "scenario-student" and r.status == "ok"]
    if student_rows:
        sm = [grid.row(n).stat("acc")[0] for n in student_rows]
        out["student_rows_monotone"] = all(a <= b for a, b in zip(sm, sm[1:]))
    return out


def run_ablation(
    rows: Sequence[RowSpec | str] | str,
    source: TFRDataset | None,
    target: TFRDataset,
    base_cfg: TrainConfig,
    seeds: Sequence[int] = (0,),
    pretrain_cfg: TrainConfig | None = None,
) -> AblationGrid:
    """Run every row for every seed; rows sharing a run key reuse results."""
    if isinstance(rows, str):
        rows = GRIDS[rows]
    specs = [ALL_ROWS[r] if isinstance(r, str) else r for r in rows]
    pretrain_cfg = pretrain_cfg or base_cfg
    target = with_single_slot_views(target, {"student_1c": "student"})
    if source is not None:
        source = with_single_slot_views(source, {"source_1c": "source_single"})

    m0_cache: dict[tuple, object] = {}
    run_cache: dict[tuple, list[dict]] = {}
    out_rows = []
    for spec in specs:
        row = AblationRow(spec)
        t0 = time.time()
        try:
            for seed in seeds:
                key = spec.run_key() + (seed,)
                if key not in run_cache:
                    run_cache[key] = _run_once(spec, seed, source, target, base_cfg, pretrain_cfg, m0_cache)
                row.runs.extend(run_cache[key])
        except Exception as exc:  # a failed row must not stop the grid
            log.exception("ablation row %s failed", spec.name)
            row.status, row.error, row.runs = "failed", f"{type(exc).__name__}: {exc}", []
        row.seconds = time.time() - t0
        out_rows.append(row)
    grid = AblationGrid(out_rows, list(seeds))
    grid.ordering = ordering_check(grid)
    return grid


def _run_once(spec: RowSpec, seed: int, source, target, base_cfg, pretrain_cfg, m0_cache) -> list[dict]:
    one = spec.capacity == "1C"
    dims = replace(base_cfg.dims, C=1) if one else base_cfg.dims
    m0 = None
    if spec.pretrain is not None:
        if source is None:
            raise ValueError(f"row {spec.name} needs a source dataset")
        src_view = "source_1c" if one else ("source_single" if spec.pretrain == "single" else "source")
        mkey = (spec.pretrain, spec.capacity, seed)
        if mkey not in m0_cache:
            pc = replace(pretrain_cfg, seed=seed, dims=dims)
            m0_cache[mkey] = pretrain_source(source, pc, view=src_view).model
        m0 = m0_cache[mkey]

    kd = spec.kd if spec.kd and any(spec.kd) else None
    if kd is None:
        mode = spec.role
        views = {spec.role: ("student_1c" if one else spec.role)}
        distill = base_cfg.distill
    else:
        mode, views = "distill", None
        distill = replace(base_cfg.distill, enable_output_kd=kd[0], enable_filterbank_kd=kd[1], enable_lstm_kd=kd[2])
    cfg = replace(base_cfg, seed=seed, dims=dims, distill=distill)
    result = distill_target(m0, target, cfg, mode=mode, views=views)
    runs = []
    for rec in result.records:
        m = rec.test[spec.role]
        runs.append({"seed": seed, "fold": rec.fold_index, "acc": m["acc"], "mf1": m["mf1"], "kappa": m["kappa"]})
    return runs


def emit_grid_report(grid: AblationGrid, path) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "grid.json"), "w") as f:
        json.dump(grid.to_dict(), f, indent=2, sort_keys=True)
    with open(os.path.join(path, "grid.csv"), "w") as f:
        f.write("row,table,role,pretrain,transfers,capacity,acc_mean,acc_std,mf1_mean,kappa_mean,n_runs,status\n")
        for r in grid.rows:
            (am, asd), (fm, _), (km, _) = r.stat("acc"), r.stat("mf1"), r.stat("kappa")
            f.write(f"{r.spec.name},{r.spec.table},{r.spec.role},{r.spec.pretrain or 'none'},"
                    f"{'+'.join(r.spec.transfers) or 'none'},{r.spec.capacity},{am!r},{asd!r},{fm!r},{km!r},"
                    f"{len(r.runs)},{r.status}\n")
    with open(os.path.join(path, "grid.txt"), "w") as f:
        f.write(format_grid(grid))


def format_grid(grid: AblationGrid) -> str:
    ref = {**{f"kd:{k}": v for k, v in REFERENCE_RESULTS["kd_acc"].items()},
           **REFERENCE_RESULTS["scenario_student_acc"],
           **{f"Teacher:{k}": v for k, v in REFERENCE_RESULTS["scenario_teacher_acc"].items()}}
    lines = [f"{'row':<28} {'group':<16} {'src':<15} {'tgt':<15} {'cap':<4} {'ACC mean±sd':<17} {'MF1':<7} {'kappa':<7} ref"]
    for r in grid.rows:
        if r.status != "ok":
            lines.append(f"{r.spec.name:<28} FAILED: {r.error}")
            continue
        (am, asd), (fm, _), (km, _) = r.stat("acc"), r.stat("mf1"), r.stat("kappa")
        rv = ref.get(r.spec.name)
        lines.append(f"{r.spec.name:<28} {r.spec.table:<16} {r.spec.source_domain:<15} {r.spec.target_domain:<15} "
                     f"{r.spec.capacity:<4} {am:.4f}±{asd:.4f}   {fm:.4f}  {km:.4f}  "
                     f"{'' if rv is None else f'{rv:.4f}'}")
    o = grid.ordering
    if o.get("evaluated"):
        lines.append("")
        lines.append(f"ordering {' <= '.join(o['chain'])}: {'PASS' if o['holds'] else 'FAIL'} "
                     f"(margin {o['margin']:.4f}, required {o['required_margin']:.2f})")
    lines.append("")
    lines.append(f"seeds: {grid.seeds}. 'ref' = full-scale Sleep-EDF accuracy reported for the method "
                 "(20-fold, MASS pre-training); not a desk-scale target.")
    return "\n".join(lines) + "\n"
