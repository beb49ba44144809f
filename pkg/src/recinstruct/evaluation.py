"""Scenario evaluation: assemble instruction, build pool, score, rank, measure.

Ranking metrics assume one relevant item per instance, so the ideal DCG is
1 and NDCG@K reduces to ``1/log2(rank + 1)`` inside the cut-off.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import jsonl
from .annotator.corpus import requests_for
from .annotator.slots import SpecificIntentionUnavailable, derive_specific_intention
from .annotator.teacher import AnnotationClient, TeacherError
from .catalog import Catalog, HeldOut
from .matcher import (
    CandidatePool,
    PoolError,
    PoolKind,
    RetrieverIndex,
    retrieve_hard_negatives,
    sample_large_pool,
    sample_uniform_pool,
)
from .scorer import Scorer, ScoreRequest, ScorerError, rank, score
from .templates import (
    AspectTags,
    CoarseTemplate,
    SlotName,
    Strategy,
    TargetSchema,
    TemplateError,
    builtin_registry,
    find_template,
    instantiate,
    render_item_list,
    render_titles,
    select_templates,
)

KS = (1, 3, 5)
DEFAULT_SKIP_THRESHOLD = 0.05
GROUPS = 10
GROUP_SIZE = 10


class EvaluationError(Exception):
    pass


# -- metrics -----------------------------------------------------------------


@dataclass(frozen=True)
class RankingOutcome:
    # None means the target was eliminated before the final ranking
    target_rank: int | None
    pool_size: int
    scenario_id: str = ""
    user_id: str = ""

    def __post_init__(self):
        if self.target_rank is not None and not 1 <= self.target_rank <= self.pool_size:
            raise ValueError(f"rank {self.target_rank} outside pool of {self.pool_size}")

    @property
    def eliminated(self) -> bool:
        return self.target_rank is None


def _check_k(k: int) -> None:
    if k not in KS:
        raise ValueError(f"K must be one of {KS}")


def hit(outcome: RankingOutcome, k: int) -> int:
    _check_k(k)
    return int(outcome.target_rank is not None and outcome.target_rank <= k)


def ndcg(outcome: RankingOutcome, k: int) -> float:
    _check_k(k)
    r = outcome.target_rank
    if r is None or r > k:
        return 0.0
    return 1.0 / math.log2(r + 1)


@dataclass(frozen=True)
class MetricReport:
    scenario_id: str
    n_instances: int
    hr: Mapping[int, float]
    ndcg: Mapping[int, float]

    @classmethod
    def from_outcomes(cls, outcomes: Sequence[RankingOutcome], scenario_id: str = "") -> MetricReport:
        n = len(outcomes)
        if n == 0:
            return cls(scenario_id, 0, {k: 0.0 for k in KS}, {k: 0.0 for k in KS})
        hr = {k: math.fsum(hit(o, k) for o in outcomes) / n for k in KS}
        nd = {k: math.fsum(ndcg(o, k) for o in outcomes) / n for k in KS}
        return cls(scenario_id, n, hr, nd)

    def metrics(self) -> dict[str, float]:
        out = {f"hr@{k}": self.hr[k] for k in KS}
        out.update({f"ndcg@{k}": self.ndcg[k] for k in KS})
        return out


# -- instruction assembly ----------------------------------------------------


def evaluable(template: CoarseTemplate) -> bool:
    """Plain templates whose answer is an item title or a yes/no verdict."""
    return template.strategy_tag is Strategy.Plain and template.target_schema in (
        TargetSchema.TargetItemTitle,
        TargetSchema.YesNo,
    )


def evaluable_templates(aspects: AspectTags, registry: Iterable[CoarseTemplate] | None = None) -> list[CoarseTemplate]:
    out = [t for t in select_templates(registry or builtin_registry(), aspects) if evaluable(t)]
    if not out:
        raise TemplateError(f"no evaluable template for {aspects}")
    return out


class SlotUnresolved(EvaluationError):
    pass


def resolve_slots(
    template: CoarseTemplate,
    inst: HeldOut,
    catalog: Catalog,
    client: AnnotationClient | None,
    intention_kind: str = "vague_intention",
) -> dict[SlotName, str]:
    """Every slot except the candidate list and the probed item."""
    values: dict[SlotName, str] = {}
    slots = template.slots
    if SlotName.HistoricalInteractions in slots:
        if not inst.history:
            raise SlotUnresolved("empty history")
        values[SlotName.HistoricalInteractions] = render_titles([catalog.title(e.item_id) for e in inst.history])
    if SlotName.SpecificIntention in slots:
        try:
            values[SlotName.SpecificIntention] = derive_specific_intention(catalog.items[inst.target.item_id]).text
        except SpecificIntentionUnavailable as exc:
            raise SlotUnresolved(str(exc)) from exc
    teacher_slots = {SlotName.ExplicitPreference, SlotName.VagueIntention} & slots
    if teacher_slots:
        if client is None:
            raise SlotUnresolved("teacher slots need an annotation client")
        if SlotName.ExplicitPreference in slots and not inst.history:
            raise SlotUnresolved("empty history")
        reqs = requests_for(template, inst, catalog, client, intention_kind)
        for name in teacher_slots:
            if name not in reqs:
                raise SlotUnresolved(f"no source text for {name.value}")
            try:
                values[name] = client.complete(reqs[name])
            except TeacherError as exc:
                raise SlotUnresolved(f"{name.value}: {exc}") from exc
    return values


def build_requests(
    template: CoarseTemplate,
    base_slots: Mapping[SlotName, str],
    candidate_titles: Sequence[str],
    target_title: str,
) -> list[ScoreRequest]:
    """Score requests for one ranking over ``candidate_titles``.

    List templates give one request whose candidates are the titles; yes/no
    templates give one request per title scoring the answer "Yes".
    """
    if template.target_schema is TargetSchema.YesNo:
        out = []
        for title in candidate_titles:
            slots = {**base_slots, SlotName.TargetItem: title}
            r = instantiate(template, slots, title, answer=title == target_title)
            out.append(ScoreRequest(r.instruction_text, ("Yes",), reference=r.target_output))
        return out
    slots = dict(base_slots)
    if SlotName.CandidateItems in template.slots:
        slots[SlotName.CandidateItems] = render_item_list(list(candidate_titles))
    r = instantiate(template, slots, target_title)
    return [ScoreRequest(r.instruction_text, tuple(candidate_titles), reference=target_title)]


def rank_candidates(
    scorer: Scorer, requests: Sequence[ScoreRequest], *, per_token: bool = False
) -> list[int]:
    """Ranking of candidate positions, best first."""
    if len(requests) == 1:
        return rank(score(scorer, requests[0]), per_token=per_token)
    yes = [score(scorer, r)[0] for r in requests]
    return rank(yes, per_token=per_token)


# -- pools -------------------------------------------------------------------


@dataclass(frozen=True)
class PoolSpec:
    kind: PoolKind = PoolKind.UniformRandom
    n_negatives: int = 9
    alpha: float = 0.5
    index: RetrieverIndex | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind is PoolKind.HardRetrieved and self.index is None:
            raise ValueError("hard-negative pools need a retriever index")
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")

    def build(self, item_ids: Sequence[str], history: Sequence[str], target: str, seed: int) -> CandidatePool:
        if self.kind is PoolKind.HardRetrieved:
            return retrieve_hard_negatives(self.index, history, target, self.n_negatives, alpha=self.alpha, seed=seed)
        if self.kind is PoolKind.LargeUniform:
            return sample_large_pool(item_ids, history, target, self.n_negatives, seed)
        return sample_uniform_pool(item_ids, history, target, self.n_negatives, seed)


def instance_seed(seed: int, *parts: str) -> int:
    h = hashlib.blake2b(repr((seed, *parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big") >> 1


def shuffled(pool: CandidatePool, seed: int) -> list[str]:
    ids = [pool.target_item_id, *pool.negatives]
    order = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in order]


# -- scenario evaluation -----------------------------------------------------


@dataclass(frozen=True)
class EvalScenario:
    scenario_id: str
    aspects: AspectTags

    @classmethod
    def parse(cls, scenario_id: str, aspects: str) -> EvalScenario:
        return cls(scenario_id, AspectTags.parse(aspects))


@dataclass
class EvaluationResult:
    report: MetricReport
    outcomes: list[RankingOutcome]
    manifest: dict
    skipped: dict[str, int]

    @property
    def valid(self) -> bool:
        return bool(self.manifest["valid"])


def write_manifest(manifest: Mapping, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _pick_template(scenario: EvalScenario, template_id: str | None) -> CoarseTemplate:
    candidates = evaluable_templates(scenario.aspects)
    if template_id is None:
        return candidates[0]
    template = find_template(template_id)
    if template.aspects != scenario.aspects:
        raise EvaluationError(f"{template_id} is {template.aspects}, scenario is {scenario.aspects}")
    if not evaluable(template):
        raise EvaluationError(f"{template_id} does not produce an item or a yes/no answer")
    return template


def evaluate_scenario(
    instances: Sequence[HeldOut],
    catalog: Catalog,
    scenario: EvalScenario,
    scorer: Scorer,
    *,
    pool: PoolSpec = PoolSpec(),
    seed: int = 0,
    template_id: str | None = None,
    slots: AnnotationClient | None = None,
    intention_kind: str = "vague_intention",
    skip_threshold: float = DEFAULT_SKIP_THRESHOLD,
    per_token: bool = False,
    workers: int = 1,
) -> EvaluationResult:
    """Rank each instance's target within its pool and average HR/NDCG.

    Instances whose slots or pool cannot be built are skipped and counted;
    a skip rate above ``skip_threshold`` marks the evaluation invalid.
    Without ``template_id`` the first evaluable template by id is used.
    """
    template = _pick_template(scenario, template_id)
    item_ids = sorted(catalog.items)

    def one(inst: HeldOut) -> RankingOutcome | str:
        s = instance_seed(seed, inst.user_id, inst.part, str(len(inst.history)))
        try:
            base = resolve_slots(template, inst, catalog, slots, intention_kind)
            cpool = pool.build(item_ids, [e.item_id for e in inst.history], inst.target.item_id, s)
        except SlotUnresolved:
            return "slot_unresolved"
        except PoolError:
            return "pool_unavailable"
        order = shuffled(cpool, s + 1)
        titles = [catalog.title(i) for i in order]
        target_title = catalog.title(inst.target.item_id)
        ranking = rank_candidates(scorer, build_requests(template, base, titles, target_title), per_token=per_token)
        target_pos = order.index(inst.target.item_id)
        return RankingOutcome(ranking.index(target_pos) + 1, cpool.size, scenario.scenario_id, inst.user_id)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, instances))
    else:
        results = [one(i) for i in instances]
    outcomes = [r for r in results if isinstance(r, RankingOutcome)]
    skipped: dict[str, int] = {}
    for r in results:
        if isinstance(r, str):
            skipped[r] = skipped.get(r, 0) + 1
    report = MetricReport.from_outcomes(outcomes, scenario.scenario_id)
    n_skipped = sum(skipped.values())
    total = len(instances)
    skip_rate = n_skipped / total if total else 0.0
    manifest = {
        "scenario": scenario.scenario_id,
        "aspects": str(scenario.aspects),
        "template_id": template.template_id,
        "scorer": scorer.identity,
        "pool_kind": pool.kind.value,
        "pool_negatives": pool.n_negatives,
        "seed": seed,
        "per_token": per_token,
        "metrics": report.metrics(),
        "n": report.n_instances,
        "skipped": n_skipped,
        "skip_reasons": dict(sorted(skipped.items())),
        "skip_rate": skip_rate,
        "valid": total > 0 and skip_rate <= skip_threshold,
    }
    return EvaluationResult(report, outcomes, manifest, skipped)


def template_selection_on_validation(
    scenario: EvalScenario,
    candidate_ids: Sequence[str],
    scorer: Scorer,
    validation: Sequence[HeldOut],
    catalog: Catalog,
    **kwargs,
) -> str:
    """Candidate with the best validation NDCG@5; ties go to the smaller id."""
    if not candidate_ids:
        raise ValueError("need at least one candidate template")
    best_id, best = None, -1.0
    for tid in sorted(candidate_ids):
        value = evaluate_scenario(validation, catalog, scenario, scorer, template_id=tid, **kwargs).report.ndcg[5]
        if value > best:
            best_id, best = tid, value
    return best_id


# -- grouped reranking -------------------------------------------------------

GroupAssembler = Callable[[Sequence[str]], Sequence[ScoreRequest]]


@dataclass(frozen=True)
class GroupedOutcome:
    outcome: RankingOutcome
    winners: tuple[str, ...]
    groups: tuple[tuple[str, ...], ...]

    @property
    def survived(self) -> bool:
        return not self.outcome.eliminated


def grouped_rerank(
    pool: CandidatePool,
    assembler: GroupAssembler,
    scorer: Scorer,
    seed: int,
    *,
    per_token: bool = False,
    scenario_id: str = "",
    user_id: str = "",
) -> GroupedOutcome:
    """Shuffle 100 candidates into 10 groups of 10, keep each group's best,
    then rank the 10 winners in a second, independent scoring pass.

    ``assembler`` turns an ordered list of candidate ids into the score
    requests for ranking them. A target that loses its group is eliminated.
    """
    if pool.size != GROUPS * GROUP_SIZE:
        raise PoolError(f"grouped reranking needs exactly {GROUPS * GROUP_SIZE} candidates, got {pool.size}")
    order = shuffled(pool, seed)
    groups = tuple(tuple(order[g * GROUP_SIZE : (g + 1) * GROUP_SIZE]) for g in range(GROUPS))
    winners = []
    for group in groups:
        best = rank_candidates(scorer, assembler(group), per_token=per_token)[0]
        winners.append(group[best])
    final = rank_candidates(scorer, assembler(winners), per_token=per_token)
    target = pool.target_item_id
    if target in winners:
        target_rank = final.index(winners.index(target)) + 1
    else:
        target_rank = None
    return GroupedOutcome(RankingOutcome(target_rank, len(winners), scenario_id, user_id), tuple(winners), groups)


def grouped_evaluation(
    instances: Sequence[HeldOut],
    catalog: Catalog,
    scenario: EvalScenario,
    scorer: Scorer,
    *,
    seed: int = 0,
    template_id: str | None = None,
    slots: AnnotationClient | None = None,
    intention_kind: str = "vague_intention",
    skip_threshold: float = DEFAULT_SKIP_THRESHOLD,
    per_token: bool = False,
) -> EvaluationResult:
    """Grouped reranking over 99 uniform negatives per instance."""
    template = _pick_template(scenario, template_id)
    item_ids = sorted(catalog.items)
    outcomes: list[RankingOutcome] = []
    skipped: dict[str, int] = {}
    survived = 0
    for inst in instances:
        s = instance_seed(seed, inst.user_id, inst.part, str(len(inst.history)))
        try:
            base = resolve_slots(template, inst, catalog, slots, intention_kind)
            cpool = sample_large_pool(item_ids, [e.item_id for e in inst.history], inst.target.item_id, 99, s)
        except SlotUnresolved:
            skipped["slot_unresolved"] = skipped.get("slot_unresolved", 0) + 1
            continue
        except PoolError:
            skipped["pool_unavailable"] = skipped.get("pool_unavailable", 0) + 1
            continue
        target_title = catalog.title(inst.target.item_id)

        def assembler(ids, base=base, target_title=target_title):
            return build_requests(template, base, [catalog.title(i) for i in ids], target_title)

        g = grouped_rerank(cpool, assembler, scorer, s + 1, per_token=per_token,
                           scenario_id=scenario.scenario_id, user_id=inst.user_id)
        survived += g.survived
        outcomes.append(g.outcome)
    report = MetricReport.from_outcomes(outcomes, scenario.scenario_id)
    n_skipped = sum(skipped.values())
    skip_rate = n_skipped / len(instances) if instances else 0.0
    manifest = {
        "scenario": scenario.scenario_id,
        "aspects": str(scenario.aspects),
        "template_id": template.template_id,
        "scorer": scorer.identity,
        "pool_kind": "GroupedLargeUniform",
        "pool_negatives": 99,
        "seed": seed,
        "per_token": per_token,
        "metrics": report.metrics(),
        "n": report.n_instances,
        "group_survival": survived / len(outcomes) if outcomes else 0.0,
        "skipped": n_skipped,
        "skip_reasons": dict(sorted(skipped.items())),
        "skip_rate": skip_rate,
        "valid": bool(instances) and skip_rate <= skip_threshold,
    }
    return EvaluationResult(report, outcomes, manifest, skipped)


# -- held-out scenario curves ------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    subset_id: str
    report: MetricReport | None

    def to_row(self) -> dict:
        return {"subset_id": self.subset_id, "metrics": self.report.metrics() if self.report else None}


def heldout_scenario_run(
    subsets: Sequence[str],
    scenario: EvalScenario,
    scorer_factory: Callable[[str], Scorer],
    instances: Sequence[HeldOut],
    catalog: Catalog,
    **kwargs,
) -> list[CurvePoint]:
    """One report per training subset, in order, on a fixed held-out scenario.

    A subset whose scorer cannot be built or fails is recorded as absent.
    """
    points = []
    for sid in subsets:
        try:
            scorer = scorer_factory(sid)
            result = evaluate_scenario(instances, catalog, scenario, scorer, **kwargs)
            points.append(CurvePoint(sid, result.report))
        except (KeyError, FileNotFoundError, ScorerError):
            points.append(CurvePoint(sid, None))
    return points


def write_curve(points: Sequence[CurvePoint], path: str | os.PathLike) -> None:
    jsonl.write_jsonl(path, (p.to_row() for p in points))


def read_curve(path: str | os.PathLike) -> list[dict]:
    return jsonl.read_jsonl(path)[1]


def cross_domain_eval(
    instances: Sequence[HeldOut],
    catalog_b: Catalog,
    scenario: EvalScenario,
    scorer: Scorer,
    *,
    source_dataset: str,
    target_dataset: str,
    **kwargs,
) -> EvaluationResult:
    """``evaluate_scenario`` on a second catalog, tagged with both dataset names."""
    result = evaluate_scenario(instances, catalog_b, scenario, scorer, **kwargs)
    result.manifest["datasets"] = {"source": source_dataset, "target": target_dataset}
    return result
