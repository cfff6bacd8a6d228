"""Channel importance scoring.

A unit's raw score is the L1 mass of everything that disappears with it: its
filter (out-channel) plus, unless disabled for ablation, the kernel slices of
every consumer that reads it (in-channel). Raw scores are normalized per layer
family so layers of different magnitude become comparable, then combined with
log-normalized parameter and FLOP costs so cheap-but-heavy channels sink:

    importance = weight_score + alpha * (1 - log P / log Pmax)
                              + beta  * (1 - log F / log Fmax)

with Pmax/Fmax taken over every unit of the model.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .costs import unit_flop_cost, unit_param_cost
from .errors import DegenerateModelError, PruneKitError
from .graph import ModelGraph
from .units import FULL_CHANNEL, InSliceRef, PruneUnit, group_importance

WEIGHT_NORM_MODES = ("max-min", "max", "log")

# csv/json column contract: unit_id, layer, channel, L, GL, GP, GF, Imp
RECORD_COLUMNS = ("unit_id", "layer", "channel", "L", "GL", "GP", "GF", "Imp")


@dataclass
class Config:
    """Scoring and planning configuration."""

    alpha: float = 1.0
    beta: float = 1.0
    flop_target_ratio: float = 0.5
    param_target_ratio: float | None = None  # optional secondary stopping criterion
    weight_norm_mode: str = "max-min"
    use_in_channel: bool = True
    flops_convention: str = "macs"
    min_channels_per_layer: int = 1
    passes: int = 1
    per_pass_ratio: float | None = None
    count_aux_params: bool = True

    PRESETS = {
        "vggnet": (3.0, 1.0),
        "resnet": (1.0, 1.0),
        "densenet": (0.1, 0.1),
    }

    def validate(self) -> None:
        if not 0.0 < self.flop_target_ratio < 1.0:
            raise PruneKitError(f"flop_target_ratio must be in (0, 1), got {self.flop_target_ratio}")
        if self.param_target_ratio is not None and not 0.0 < self.param_target_ratio < 1.0:
            raise PruneKitError("param_target_ratio must be in (0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise PruneKitError("alpha and beta must be nonnegative")
        if self.weight_norm_mode not in WEIGHT_NORM_MODES:
            raise PruneKitError(f"unknown weight_norm_mode {self.weight_norm_mode!r}")
        if self.flops_convention not in ("macs", "2macs"):
            raise PruneKitError(f"unknown flops_convention {self.flops_convention!r}")
        if self.min_channels_per_layer < 1:
            raise PruneKitError("min_channels_per_layer must be >= 1")
        if self.passes < 1:
            raise PruneKitError("passes must be >= 1")
        if self.per_pass_ratio is not None and not 0.0 < self.per_pass_ratio < 1.0:
            raise PruneKitError("per_pass_ratio must be in (0, 1)")

    def apply_preset(self, name: str) -> None:
        try:
            self.alpha, self.beta = self.PRESETS[name]
        except KeyError:
            raise PruneKitError(f"unknown preset {name!r}") from None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImportanceRecord:
    unit_id: str
    layer: str
    channel: int
    raw: float  # L: summed absolute weights of the unit
    weight_score: float  # GL, normalized within the unit's layer family
    param_score: float  # GP in [0, alpha]
    flop_score: float  # GF in [0, beta]
    importance: float  # GL + GP + GF
    params: int
    flops: int
    unit: PruneUnit = field(repr=False, compare=False, default=None)

    def row(self) -> list:
        return [
            self.unit_id,
            self.layer,
            self.channel,
            repr(self.raw),
            repr(self.weight_score),
            repr(self.param_score),
            repr(self.flop_score),
            repr(self.importance),
        ]


def _abs_sum_row(graph: ModelGraph, layer: str, channel: int) -> float:
    w = graph.nodes[layer].weight()
    return float(np.abs(w[channel]).sum(dtype=np.float64))


def _abs_sum_slice(graph: ModelGraph, s: InSliceRef) -> float:
    w = graph.nodes[s.layer].weight()
    return float(np.abs(w[:, s.in_channel]).sum(dtype=np.float64))


def dependency_l1(graph: ModelGraph, unit: PruneUnit, use_in_channel: bool = True) -> float:
    """Raw score: absolute weight mass of the unit's out-channel(s), plus its
    consumer slices when ``use_in_channel``. Coupled groups average over their
    members. Biases and batch-norm parameters never contribute.
    """
    if unit.kind == FULL_CHANNEL:
        member_scores = []
        for m, slices in zip(unit.members, unit.member_slices):
            score = _abs_sum_row(graph, m.layer, m.channel)
            if use_in_channel:
                score += sum(_abs_sum_slice(graph, s) for s in slices)
            member_scores.append(score)
        return group_importance(member_scores)
    # in-channel-only: the producing filter survives but still anchors the score
    score = _abs_sum_row(graph, unit.origin.layer, unit.origin.channel)
    if use_in_channel:
        score += sum(_abs_sum_slice(graph, s) for s in unit.in_slices)
    return score


def normalize_weight_scores(scores: list[float], mode: str = "max-min") -> list[float]:
    """Normalize one layer family's raw scores onto [0, 1].

    max-min maps the range endpoints to 0 and 1; a layer whose scores are all
    equal gets the neutral 0.5 so its cost terms decide. max divides by the
    maximum; log uses log(1+L)/log(1+Lmax). Both reject an all-zero layer.
    """
    if not scores:
        raise ValueError("empty score list")
    lmax = max(scores)
    lmin = min(scores)
    if mode == "max-min":
        if lmax == lmin:
            return [0.5] * len(scores)
        return [(s - lmin) / (lmax - lmin) for s in scores]
    if mode == "max":
        if lmax == 0.0:
            raise DegenerateModelError("cannot max-normalize an all-zero layer")
        return [s / lmax for s in scores]
    if mode == "log":
        if lmax == 0.0:
            raise DegenerateModelError("cannot log-normalize an all-zero layer")
        denom = math.log1p(lmax)
        return [math.log1p(s) / denom for s in scores]
    raise ValueError(f"unknown weight_norm_mode {mode!r}")


def normalize_cost_scores(
    p: int, f: int, pmax: int, fmax: int, alpha: float, beta: float
) -> tuple[float, float]:
    """Cost bonuses: 0 for the most expensive unit, up to alpha/beta for the cheapest."""
    if pmax < 2 or fmax < 2:
        raise DegenerateModelError("model too small to normalize cost scores (max cost < 2)")
    if p < 1 or f < 1 or p > pmax or f > fmax:
        raise ValueError(f"cost out of range: P={p}/{pmax}, F={f}/{fmax}")
    gp = alpha * (1.0 - math.log(p) / math.log(pmax))
    gf = beta * (1.0 - math.log(f) / math.log(fmax))
    return gp, gf


def combined_importance(weight_score: float, param_score: float, flop_score: float) -> float:
    return weight_score + param_score + flop_score


def score_all(graph: ModelGraph, units: list[PruneUnit], config: Config) -> list[ImportanceRecord]:
    """Score every unit. Deterministic given graph and config; the cost maxima
    are taken over exactly this unit set."""
    config.validate()
    raws = [dependency_l1(graph, u, config.use_in_channel) for u in units]

    by_family: dict[str, list[int]] = {}
    for i, u in enumerate(units):
        by_family.setdefault(u.family, []).append(i)
    weight_scores = [0.0] * len(units)
    for family, idxs in by_family.items():
        normed = normalize_weight_scores([raws[i] for i in idxs], config.weight_norm_mode)
        for i, g in zip(idxs, normed):
            weight_scores[i] = g

    params = [unit_param_cost(graph, u) for u in units]
    flops = [unit_flop_cost(graph, u, config.flops_convention) for u in units]
    pmax, fmax = max(params), max(flops)

    records = []
    for u, raw, gl, p, f in zip(units, raws, weight_scores, params, flops):
        gp, gf = normalize_cost_scores(p, f, pmax, fmax, config.alpha, config.beta)
        anchor = u.members[0] if u.members else u.in_slices[0]
        channel = anchor.channel if u.members else anchor.in_channel
        records.append(
            ImportanceRecord(
                unit_id=u.uid,
                layer=anchor.layer,
                channel=channel,
                raw=raw,
                weight_score=gl,
                param_score=gp,
                flop_score=gf,
                importance=combined_importance(gl, gp, gf),
                params=p,
                flops=f,
                unit=u,
            )
        )
    return records


def records_to_csv(records: list[ImportanceRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    for r in records:
        writer.writerow(r.row())
    return buf.getvalue()


def records_to_json(records: list[ImportanceRecord]) -> str:
    rows = [dict(zip(RECORD_COLUMNS, [r.unit_id, r.layer, r.channel, r.raw, r.weight_score, r.param_score, r.flop_score, r.importance])) for r in records]
    return json.dumps(rows, indent=2) + "\n"
