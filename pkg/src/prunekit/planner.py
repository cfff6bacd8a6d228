"""Global ranking and FLOP-budgeted selection.

Units are ranked by ascending importance and marked for removal greedily until
the exact recounted model FLOPs meet the budget. Recounting (rather than
summing per-unit costs) is what keeps plans truthful: removing channels in
adjacent layers shrinks a layer's cost multiplicatively, and unit costs would
double-count the shared term. Ties in importance break toward the costlier
unit (larger F, then larger P, then unit id), so equal-importance removals buy
the most budget. A survival floor keeps every weighted layer alive.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

from .costs import effective_model_costs
from .errors import InfeasibleBudgetError, PruneKitError
from .graph import ModelGraph, graph_checksum
from .scoring import Config, ImportanceRecord


@dataclass
class PruningPlan:
    removed_unit_ids: list[str]  # ascending importance
    threshold: float  # importance of the last removed unit
    baseline_params: int
    baseline_flops: int
    predicted_params: int
    predicted_flops: int
    prr: float
    frr: float
    layer_widths_before: dict[str, int]
    layer_widths_after: dict[str, int]
    model_checksum: str
    config: dict
    removed_entries: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "baseline": {"params": self.baseline_params, "flops": self.baseline_flops},
            "predicted": {
                "params": self.predicted_params,
                "flops": self.predicted_flops,
                "prr": self.prr,
                "frr": self.frr,
            },
            "threshold": self.threshold,
            "removed_units": self.removed_entries,
            "layer_widths": {"before": self.layer_widths_before, "after": self.layer_widths_after},
            "config": self.config,
            "model_checksum": self.model_checksum,
        }
        return json.dumps(payload, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "PruningPlan":
        try:
            payload = json.loads(text)
            return PruningPlan(
                removed_unit_ids=[e["unit_id"] for e in payload["removed_units"]],
                threshold=payload["threshold"],
                baseline_params=payload["baseline"]["params"],
                baseline_flops=payload["baseline"]["flops"],
                predicted_params=payload["predicted"]["params"],
                predicted_flops=payload["predicted"]["flops"],
                prr=payload["predicted"]["prr"],
                frr=payload["predicted"]["frr"],
                layer_widths_before=payload["layer_widths"]["before"],
                layer_widths_after=payload["layer_widths"]["after"],
                model_checksum=payload["model_checksum"],
                config=payload["config"],
                removed_entries=payload["removed_units"],
            )
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise PruneKitError(f"malformed plan file: {e}") from e


def rank_global(records: list[ImportanceRecord]) -> list[ImportanceRecord]:
    """Ascending importance; ties resolved by larger FLOP cost, then larger
    parameter cost, then unit id. Deterministic."""
    if not records:
        raise ValueError("no records to rank")
    return sorted(records, key=lambda r: (r.importance, -r.flops, -r.params, r.unit_id))


def select_threshold(
    records: list[ImportanceRecord], graph: ModelGraph, config: Config
) -> PruningPlan:
    """Pick the shortest ascending-importance prefix whose removal meets the
    FLOP budget, skipping units that would empty a layer past the floor.

    Raises InfeasibleBudgetError (with the best achievable reduction) when the
    floors make the target unreachable.
    """
    config.validate()
    ranked = rank_global(records)
    baseline_params, baseline_flops = effective_model_costs(
        graph, convention=config.flops_convention, count_aux_params=config.count_aux_params
    )
    budget = (1.0 - config.flop_target_ratio) * baseline_flops
    param_budget = (
        (1.0 - config.param_target_ratio) * baseline_params
        if config.param_target_ratio is not None
        else None
    )

    out_width = {n.id: n.declared_out_width() for n in graph.weighted_layers()}
    in_width = {n.id: n.declared_in_width() for n in graph.weighted_layers()}
    removed_out: Counter[str] = Counter()
    removed_slots: Counter[str] = Counter()

    taken: list[ImportanceRecord] = []
    params, flops = baseline_params, baseline_flops
    met = False
    for rec in ranked:
        unit = rec.unit
        if any(
            out_width[m.layer] - removed_out[m.layer] - 1 < config.min_channels_per_layer
            for m in unit.members
        ):
            continue
        slot_hits = Counter(s.layer for s in unit.in_slices)
        if any(
            in_width[layer] - removed_slots[layer] - hits < 1 for layer, hits in slot_hits.items()
        ):
            continue
        for m in unit.members:
            removed_out[m.layer] += 1
        removed_slots.update(slot_hits)
        taken.append(rec)
        params, flops = effective_model_costs(
            graph,
            dict(removed_out),
            dict(removed_slots),
            convention=config.flops_convention,
            count_aux_params=config.count_aux_params,
        )
        if flops <= budget and (param_budget is None or params <= param_budget):
            met = True
            break

    frr = 1.0 - flops / baseline_flops
    if not met:
        raise InfeasibleBudgetError(
            f"FLOP target {config.flop_target_ratio:.3f} unreachable under layer floors; "
            f"best achievable reduction is {frr:.4f}",
            best_frr=frr,
        )

    widths_after = {lid: out_width[lid] - removed_out[lid] for lid in out_width}
    return PruningPlan(
        removed_unit_ids=[r.unit_id for r in taken],
        threshold=taken[-1].importance,
        baseline_params=baseline_params,
        baseline_flops=baseline_flops,
        predicted_params=params,
        predicted_flops=flops,
        prr=1.0 - params / baseline_params,
        frr=frr,
        layer_widths_before=dict(out_width),
        layer_widths_after=widths_after,
        model_checksum=graph_checksum(graph),
        config=config.to_dict(),
        removed_entries=[
            {
                "unit_id": r.unit_id,
                "imp": r.importance,
                "members": [[m.layer, m.channel] for m in r.unit.members],
                "in_slices": [[s.layer, s.in_channel] for s in r.unit.in_slices],
            }
            for r in taken
        ],
    )


def multi_pass(
    graph: ModelGraph, config: Config, per_pass_ratio: float
) -> list[tuple[PruningPlan, ModelGraph]]:
    """Iteratively score, plan and prune ``config.passes`` times, re-scoring
    the pruned weights each pass. Returns the full (plan, graph) trajectory."""
    from .surgeon import apply_plan  # local import: surgeon depends on this module
    from .units import build_prune_units
    from .scoring import score_all

    config.validate()
    if not 0.0 < per_pass_ratio < 1.0:
        raise PruneKitError("per-pass ratio must be in (0, 1)")
    trajectory: list[tuple[PruningPlan, ModelGraph]] = []
    current = graph
    for _ in range(config.passes):
        pass_config = Config(**{**config.to_dict(), "flop_target_ratio": per_pass_ratio})
        units = build_prune_units(current)
        records = score_all(current, units, pass_config)
        plan = select_threshold(records, current, pass_config)
        current, _report = apply_plan(current, plan)
        trajectory.append((plan, current))
    return trajectory
