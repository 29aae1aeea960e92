"""Layer selection from per-layer quality scores.

Given, for each quality dimension ``i`` and layer ``l``, the scores of the
unmodified model (``baseline[i]``), the model with layer ``l`` replaced by its
hybrid student (``replace[l, i]``) and the model with layer ``l`` skipped
(``skip[l, i]``):

* the recovery rate ``(replace - skip) / (baseline - skip)`` says how much of
  the layer's softmax contribution the student recovers;
* dimensions whose layer-averaged recovery reaches the threshold are
  recoverable (HR), the rest sensitive (HS);
* the protection score ``p = dHS + beta * max(dHR, 0)`` with ``d* = mean
  (baseline - replace)`` over each group ranks layers, and the ``budget``
  layers with the smallest ``p`` are replaced.

Score files are JSON (``{"records": [...]}`` or a bare list) or CSV, one
record per (layer, dimension) with fields ``layer, dimension, baseline,
replace, skip``.  ``baseline`` must agree across layers for a dimension.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from .numerics import ContractError

log = logging.getLogger(__name__)

EPS_DENOM = 1e-9
DEFAULT_THRESHOLD = 0.85
DEFAULT_BETA = 0.5
_THRESHOLD_TOL = 1e-12
SCORE_FIELDS = ("layer", "dimension", "baseline", "replace", "skip")


@dataclass
class ScoreTable:
    dimensions: List[str]
    layers: List[int]
    baseline: np.ndarray          # (dims,)
    replace: np.ndarray           # (layers, dims)
    skip: np.ndarray              # (layers, dims)

    def __post_init__(self):
        self.baseline = np.asarray(self.baseline, dtype=np.float64)
        self.replace = np.asarray(self.replace, dtype=np.float64)
        self.skip = np.asarray(self.skip, dtype=np.float64)
        nl, nd = len(self.layers), len(self.dimensions)
        if self.baseline.shape != (nd,) or self.replace.shape != (nl, nd) or self.skip.shape != (nl, nd):
            raise ContractError("score arrays do not match the layer/dimension lists")
        if len(set(self.layers)) != nl or len(set(self.dimensions)) != nd:
            raise ContractError("duplicate layer ids or dimension names")
        for name in ("baseline", "replace", "skip"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractError(f"non-finite {name} score")

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "ScoreTable":
        if not records:
            raise ContractError("empty score table")
        layers = sorted({int(r["layer"]) for r in records})
        dims: List[str] = []
        for r in records:
            if str(r["dimension"]) not in dims:
                dims.append(str(r["dimension"]))
        li = {l: n for n, l in enumerate(layers)}
        di = {d: n for n, d in enumerate(dims)}
        base = np.full(len(dims), np.nan)
        rep = np.full((len(layers), len(dims)), np.nan)
        skp = np.full((len(layers), len(dims)), np.nan)
        seen = set()
        for r in records:
            missing = [f for f in SCORE_FIELDS if f not in r]
            if missing:
                raise ContractError(f"score record lacks {missing}")
            l, d = li[int(r["layer"])], di[str(r["dimension"])]
            if (l, d) in seen:
                raise ContractError(f"duplicate cell (layer {r['layer']}, {r['dimension']})")
            seen.add((l, d))
            b = float(r["baseline"])
            if not math.isnan(base[d]) and base[d] != b:
                raise ContractError(f"baseline for {r['dimension']!r} differs between layers")
            base[d] = b
            rep[l, d] = float(r["replace"])
            skp[l, d] = float(r["skip"])
        if len(seen) != len(layers) * len(dims):
            raise ContractError("score table has missing (layer, dimension) cells")
        return cls(dims, layers, base, rep, skp)

    @classmethod
    def load(cls, path) -> "ScoreTable":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() == ".csv":
            records = list(csv.DictReader(text.splitlines()))
        else:
            data = json.loads(text)
            records = data["records"] if isinstance(data, dict) else data
        return cls.from_records(records)

    def records(self) -> List[dict]:
        return [{"layer": l, "dimension": d, "baseline": float(self.baseline[j]),
                 "replace": float(self.replace[i, j]), "skip": float(self.skip[i, j])}
                for i, l in enumerate(self.layers) for j, d in enumerate(self.dimensions)]

    def permuted(self, order: Sequence[int]) -> "ScoreTable":
        """Same table with layer rows reordered (``order`` indexes rows)."""
        order = list(order)
        return ScoreTable(list(self.dimensions), [self.layers[i] for i in order],
                          self.baseline.copy(), self.replace[order], self.skip[order])


def arr(table: ScoreTable, eps_denom: float = EPS_DENOM) -> np.ndarray:
    """Recovery rate per (layer, dimension); NaN where the denominator is degenerate."""
    num = table.replace - table.skip
    den = table.baseline[None, :] - table.skip
    ok = np.abs(den) >= eps_denom
    out = np.full(num.shape, np.nan)
    np.divide(num, den, out=out, where=ok)
    return out


class DimensionSplit(NamedTuple):
    hr: List[int]
    hs: List[int]
    unclassified: List[int]


def classify_dims(arr_matrix: np.ndarray, threshold_hr: float = DEFAULT_THRESHOLD) -> DimensionSplit:
    """Split dimension indices by layer-averaged recovery over defined cells."""
    if not 0.0 < threshold_hr < 1.0:
        raise ContractError("threshold must lie in (0, 1)")
    hr, hs, none = [], [], []
    for i in range(arr_matrix.shape[1]):
        col = arr_matrix[:, i]
        col = col[~np.isnan(col)]
        if col.size == 0:
            none.append(i)
        elif col.mean() >= threshold_hr - _THRESHOLD_TOL:
            hr.append(i)
        else:
            hs.append(i)
    return DimensionSplit(hr, hs, none)


def protection_scores(table: ScoreTable, hr_dims: Sequence[int], hs_dims: Sequence[int],
                      beta: float = DEFAULT_BETA) -> np.ndarray:
    """p per layer (same order as ``table.layers``)."""
    if beta < 0:
        raise ContractError("beta must be >= 0")
    drop = table.baseline[None, :] - table.replace
    if len(hs_dims):
        d_hs = drop[:, list(hs_dims)].mean(axis=1)
    else:
        log.warning("no sensitive dimensions; the HS term is taken as 0")
        d_hs = np.zeros(len(table.layers))
    d_hr = drop[:, list(hr_dims)].mean(axis=1) if len(hr_dims) else np.zeros(len(table.layers))
    return d_hs + beta * np.maximum(d_hr, 0.0)


@dataclass
class SelectionResult:
    replaced: List[int]
    p: Dict[int, float]
    tiebreak_log: List[dict] = field(default_factory=list)
    arr: Optional[np.ndarray] = None
    layers: List[int] = field(default_factory=list)
    dimensions: List[str] = field(default_factory=list)
    hr_dims: List[str] = field(default_factory=list)
    hs_dims: List[str] = field(default_factory=list)
    unclassified_dims: List[str] = field(default_factory=list)
    beta: Optional[float] = None
    threshold_hr: Optional[float] = None

    def to_json(self) -> dict:
        arr_rows = None
        if self.arr is not None:
            arr_rows = [[None if math.isnan(x) else float(x) for x in row] for row in self.arr]
        return {
            "layers": list(self.layers),
            "dimensions": list(self.dimensions),
            "arr": arr_rows,
            "undefined_cells": "dropped from dimension averages",
            "threshold_hr": self.threshold_hr,
            "beta": self.beta,
            "hr_dims": list(self.hr_dims),
            "hs_dims": list(self.hs_dims),
            "unclassified_dims": list(self.unclassified_dims),
            "p": {str(k): float(v) for k, v in self.p.items()},
            "replaced": list(self.replaced),
            "tiebreak_log": list(self.tiebreak_log),
        }


def select(p: Sequence[float], budget: int, layer_ids: Optional[Sequence[int]] = None) -> SelectionResult:
    """The ``budget`` layers with smallest p; ties go to the smaller layer id."""
    ids = list(range(len(p))) if layer_ids is None else [int(x) for x in layer_ids]
    if len(ids) != len(p):
        raise ContractError("one layer id per score required")
    if not 0 <= budget <= len(ids):
        raise ContractError(f"budget {budget} outside 0..{len(ids)}")
    scores = {l: float(s) for l, s in zip(ids, p)}
    ranked = sorted(ids, key=lambda l: (scores[l], l))
    chosen = ranked[:budget]
    tiebreak = []
    if 0 < budget < len(ranked):
        cut = scores[ranked[budget - 1]]
        tied = [l for l in ranked if scores[l] == cut]
        if len(tied) > 1 and scores[ranked[budget]] == cut:
            tiebreak.append({"p": cut, "tied_layers": sorted(tied),
                             "selected": sorted(l for l in tied if l in chosen),
                             "rule": "smaller layer id wins"})
    return SelectionResult(sorted(chosen), scores, tiebreak)


def select_layers(table: ScoreTable, budget: int, beta: float = DEFAULT_BETA,
                  threshold_hr: float = DEFAULT_THRESHOLD) -> SelectionResult:
    """Full pipeline: recovery rates, dimension split, protection scores, selection."""
    a = arr(table)
    split = classify_dims(a, threshold_hr)
    if split.unclassified:
        log.warning("dimensions without defined recovery cells: %s",
                    [table.dimensions[i] for i in split.unclassified])
    p = protection_scores(table, split.hr, split.hs, beta)
    res = select(p, budget, table.layers)
    res.arr = a
    res.layers = list(table.layers)
    res.dimensions = list(table.dimensions)
    res.hr_dims = [table.dimensions[i] for i in split.hr]
    res.hs_dims = [table.dimensions[i] for i in split.hs]
    res.unclassified_dims = [table.dimensions[i] for i in split.unclassified]
    res.beta = beta
    res.threshold_hr = threshold_hr
    return res
