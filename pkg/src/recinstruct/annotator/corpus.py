"""Corpus generation: plan, prefetch teacher slots, assemble in plan order.

Every random choice (user instance, template variant, yes/no answer,
candidate pool) is drawn while planning, before any teacher call, so the
corpus depends only on the catalog, the split, the config and the teacher's
answers. Teacher calls run concurrently; assembly follows the plan order.
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .. import jsonl
from ..catalog import Catalog, DatasetSplit, HeldOut
from ..matcher import PoolError, sample_uniform_pool
from ..templates import (
    AspectTags,
    CoarseTemplate,
    SlotName,
    Strategy,
    TargetSchema,
    TemplateError,
    body_word_count,
    builtin_registry,
    cot_response,
    instantiate,
    render_item_list,
    render_titles,
    select_templates,
)
from .slots import (
    InstructionInstance,
    SpecificIntentionUnavailable,
    derive_specific_intention,
    history_and_item,
    query_and_item,
)
from .teacher import AnnotationClient, BudgetExhausted, TeacherError, TeacherRequest

log = logging.getLogger(__name__)

PURPOSES = ("training", "evaluation")


@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: str
    aspects: AspectTags
    quota: int
    strategy: Strategy | None = None
    # restrict to these concrete template ids (all matching ones when empty)
    template_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if isinstance(self.aspects, str):
            object.__setattr__(self, "aspects", AspectTags.parse(self.aspects))
        if isinstance(self.strategy, str):
            object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "template_ids", tuple(self.template_ids))
        if self.quota < 0:
            raise ValueError("quota must be non-negative")

    def as_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "aspects": str(self.aspects),
            "quota": self.quota,
            "strategy": self.strategy.value if self.strategy else None,
            "template_ids": list(self.template_ids),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ScenarioSpec:
        return cls(
            d["scenario_id"],
            AspectTags.parse(d["aspects"]),
            int(d["quota"]),
            Strategy(d["strategy"]) if d.get("strategy") else None,
            tuple(d.get("template_ids", ())),
        )


def default_scenarios(quota: int = 10) -> tuple[ScenarioSpec, ...]:
    """The seven interaction scenarios of the evaluation grid."""
    triples = [
        ("sequential", "P1,I0,T0"),
        ("product_rerank", "P2,I0,T3"),
        ("personalized_search_vague", "P0,I1,T2"),
        ("personalized_search_specific", "P0,I2,T2"),
        ("preference_matching", "P2,I0,T2"),
        ("history_vague", "P1,I1,T2"),
        ("history_specific", "P1,I2,T2"),
    ]
    return tuple(ScenarioSpec(sid, AspectTags.parse(a), quota) for sid, a in triples)


@dataclass(frozen=True)
class GenerationConfig:
    scenarios: tuple[ScenarioSpec, ...] = field(default_factory=default_scenarios)
    seed: int = 0
    purpose: str = "training"
    splits: tuple[str, ...] = ("train",)
    n_candidates: int = 10
    concurrency: int = 4
    max_upstream_calls: int | None = None
    intention_kind: str = "vague_intention"

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise ValueError(f"purpose must be one of {PURPOSES}")
        bad = set(self.splits) - {"train", "validation", "test"}
        if bad:
            raise ValueError(f"unknown split parts {sorted(bad)}")
        if self.purpose == "training" and set(self.splits) != {"train"}:
            raise ValueError("a training corpus may only draw from the train split")
        if self.n_candidates < 2:
            raise ValueError("n_candidates must be >= 2")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")

    def as_dict(self) -> dict:
        return {
            "scenarios": [s.as_dict() for s in self.scenarios],
            "seed": self.seed,
            "purpose": self.purpose,
            "splits": list(self.splits),
            "n_candidates": self.n_candidates,
            "max_upstream_calls": self.max_upstream_calls,
            "intention_kind": self.intention_kind,
        }

    @property
    def digest(self) -> str:
        # concurrency never changes output, so it stays out of the digest
        return jsonl.digest(self.as_dict())

    @property
    def total_quota(self) -> int:
        return sum(s.quota for s in self.scenarios)


# -- planning ----------------------------------------------------------------


@dataclass(frozen=True)
class PlannedAttempt:
    seq: int
    scenario: ScenarioSpec
    template: CoarseTemplate
    instance: HeldOut
    # item shown in a yes/no question and the answer
    probe_item: str | None = None
    answer: bool | None = None
    # shuffled candidate ids for list templates (target included)
    candidates: tuple[str, ...] = ()
    # reason the attempt cannot be filled, decided while planning
    unfillable: str | None = None


def _needs(template: CoarseTemplate) -> set[SlotName]:
    """Slots whose content must be produced: the body plus what the target carries."""
    needed = set(template.slots)
    if template.target_slot is not None:
        needed.add(template.target_slot)
    if template.target == "Reasoning":
        needed.add(SlotName.ExplicitPreference)
    elif template.target in ("ExplicitPreference", "HistoricalInteractions"):
        needed.add(SlotName(template.target))
    elif template.target == "HistoryAndItem":
        needed.add(SlotName.HistoricalInteractions)
    return needed


def _instances(split: DatasetSplit, parts: Sequence[str]) -> list[HeldOut]:
    out = []
    for part in parts:
        out.extend(h for h in split.held_out(part) if h.history)
    return out


def plan_corpus(catalog: Catalog, split: DatasetSplit, config: GenerationConfig) -> list[PlannedAttempt]:
    """Exactly ``quota`` attempts per scenario, every random draw fixed here.

    Only instances with a non-empty history are drawn.
    """
    pool = _instances(split, config.splits)
    if not pool:
        raise ValueError("no instances with a history in the requested split parts")
    registry = builtin_registry()
    item_ids = sorted(catalog.items)
    rng = np.random.default_rng(config.seed)
    plan: list[PlannedAttempt] = []
    for spec in config.scenarios:
        templates = select_templates(registry, spec.aspects, spec.strategy)
        if spec.template_ids:
            templates = [t for t in templates if t.template_id in spec.template_ids]
            if not templates:
                raise TemplateError(f"{spec.scenario_id}: none of {spec.template_ids} match {spec.aspects}")
        for _ in range(spec.quota):
            inst = pool[int(rng.integers(len(pool)))]
            template = templates[int(rng.integers(len(templates)))]
            pool_seed = int(rng.integers(2**31))
            coin = bool(rng.integers(2))
            history = [e.item_id for e in inst.history]
            probe, answer, candidates, unfillable = None, None, (), None
            try:
                if template.target_schema is TargetSchema.YesNo:
                    answer = coin
                    if answer:
                        probe = inst.target.item_id
                    else:
                        probe = sample_uniform_pool(item_ids, history, inst.target.item_id, 1, pool_seed).negatives[0]
                if SlotName.CandidateItems in template.slots:
                    p = sample_uniform_pool(item_ids, history, inst.target.item_id, config.n_candidates - 1, pool_seed)
                    ids = [p.target_item_id, *p.negatives]
                    order = np.random.default_rng(pool_seed + 1).permutation(len(ids))
                    candidates = tuple(ids[i] for i in order)
            except PoolError:
                probe, candidates, unfillable = None, (), "pool_too_small"
            plan.append(PlannedAttempt(len(plan), spec, template, inst, probe, answer, candidates, unfillable))
    return plan


def _history_titles(inst: HeldOut, catalog: Catalog) -> list[str]:
    return [catalog.title(e.item_id) for e in inst.history]


def _context(inst: HeldOut, catalog: Catalog) -> dict:
    items = [catalog.items[e.item_id] for e in inst.history]
    return {
        "titles": [i.title for i in items],
        "leaf_categories": [i.categories[-1] if i.categories else "" for i in items],
    }


def requests_for(
    template: CoarseTemplate,
    inst: HeldOut,
    catalog: Catalog,
    client: AnnotationClient,
    intention_kind: str = "vague_intention",
) -> dict[SlotName, TeacherRequest]:
    """Teacher requests the template needs for one instance.

    A vague intention needs a review; without one no request is made.
    """
    needed = _needs(template)
    out: dict[SlotName, TeacherRequest] = {}
    if SlotName.ExplicitPreference in needed:
        history = render_titles(_history_titles(inst, catalog))
        out[SlotName.ExplicitPreference] = client.request(
            "explicit_preference", _context(inst, catalog), history=history
        )
    if SlotName.VagueIntention in needed and inst.target.review_text and inst.target.review_text.strip():
        review = " ".join(inst.target.review_text.split())
        out[SlotName.VagueIntention] = client.request(intention_kind, {"review": review}, review=review)
    return out


def teacher_requests(
    attempt: PlannedAttempt, catalog: Catalog, client: AnnotationClient, config: GenerationConfig
) -> dict[SlotName, TeacherRequest]:
    return requests_for(attempt.template, attempt.instance, catalog, client, config.intention_kind)


# -- prefetch ----------------------------------------------------------------


@dataclass
class PrefetchResult:
    texts: dict[str, str] = field(default_factory=dict)
    errors: dict[str, Exception] = field(default_factory=dict)
    budget_cut: bool = False


def prefetch(
    plan: Sequence[PlannedAttempt],
    catalog: Catalog,
    client: AnnotationClient,
    config: GenerationConfig,
) -> PrefetchResult:
    """Resolve every teacher request of the plan, cache first.

    Under a call budget, uncached requests are granted in plan order, so the
    same plan and cache state always cut at the same request.
    """
    ordered: dict[str, TeacherRequest] = {}
    for attempt in plan:
        for req in teacher_requests(attempt, catalog, client, config).values():
            ordered.setdefault(req.digest, req)
    result = PrefetchResult()
    todo = []
    for d, req in ordered.items():
        if client.cached(req):
            result.texts[d] = client.complete(req)
        else:
            todo.append((d, req))
    budget = config.max_upstream_calls
    if budget is not None:
        remaining = max(0, budget - client.upstream_calls)
        if len(todo) > remaining:
            for d, _ in todo[remaining:]:
                result.errors[d] = BudgetExhausted("upstream call budget exhausted")
            result.budget_cut = True
            todo = todo[:remaining]

    def run(item):
        d, req = item
        try:
            return d, client.complete(req), None
        except TeacherError as exc:
            return d, None, exc

    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        for d, text, exc in pool.map(run, todo):
            if exc is None:
                result.texts[d] = text
            else:
                result.errors[d] = exc
                if isinstance(exc, BudgetExhausted):
                    result.budget_cut = True
    return result


# -- assembly ----------------------------------------------------------------


@dataclass
class CorpusStats:
    n_instances: int = 0
    by_kind: Counter = field(default_factory=Counter)
    by_template: Counter = field(default_factory=Counter)
    by_scenario: Counter = field(default_factory=Counter)
    skipped: Counter = field(default_factory=Counter)
    total_words: int = 0
    partial: bool = False

    @property
    def mean_words(self) -> float:
        return self.total_words / self.n_instances if self.n_instances else 0.0

    def add(self, inst: InstructionInstance) -> None:
        self.n_instances += 1
        self.by_kind[inst.kind] += 1
        self.by_template[inst.rendered.template_id] += 1
        self.by_scenario[inst.scenario_id] += 1
        self.total_words += len(inst.rendered.instruction_text.split())

    def as_dict(self) -> dict:
        return {
            "n_instances": self.n_instances,
            "by_kind": {k: self.by_kind.get(k, 0) for k in ("preference", "intention")},
            "mean_words": round(self.mean_words, 6),
            "by_template": dict(sorted(self.by_template.items())),
            "by_scenario": dict(sorted(self.by_scenario.items())),
            "skipped": dict(sorted(self.skipped.items())),
            "partial": self.partial,
        }


def format_stats(stats: CorpusStats, registry: Iterable[CoarseTemplate] | None = None) -> str:
    """Two-block summary: generated instances, then the coarse template set."""
    reg = list(registry) if registry is not None else builtin_registry()
    cats = Counter(t.category for t in reg)
    mean_body = sum(body_word_count(t.body) for t in reg) / len(reg)
    rows = [
        ("# of fine-grained instructions", f"{stats.n_instances:,}"),
        ("  - # of user-described preferences", f"{stats.by_kind.get('preference', 0):,}"),
        ("  - # of user intention in decision making", f"{stats.by_kind.get('intention', 0):,}"),
        ("ave. instruction length (in words)", f"{stats.mean_words:.1f}"),
        ("# of coarse-grained instructions", f"{len(reg)}"),
        ("  - # of preferences related instructions", f"{cats.get('preference', 0)}"),
        ("  - # of intentions related instructions", f"{cats.get('intention', 0)}"),
        ("  - # of combined instructions", f"{cats.get('combined', 0)}"),
        ("ave. instruction length (in words)", f"{mean_body:.1f}"),
    ]
    if stats.skipped:
        rows.append(("skipped attempts", f"{sum(stats.skipped.values()):,}"))
    if stats.partial:
        rows.append(("PARTIAL", "budget exhausted"))
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


class _Skip(Exception):
    pass


def _fill(
    attempt: PlannedAttempt,
    catalog: Catalog,
    teacher_text: Mapping[SlotName, str],
) -> InstructionInstance:
    t = attempt.template
    inst = attempt.instance
    target_item = catalog.items[inst.target.item_id]
    values: dict[SlotName, str] = {}
    needed = _needs(t)
    for name in needed:
        if name is SlotName.HistoricalInteractions:
            values[name] = render_titles(_history_titles(inst, catalog))
        elif name in (SlotName.ExplicitPreference, SlotName.VagueIntention):
            values[name] = teacher_text[name]
        elif name is SlotName.SpecificIntention:
            try:
                values[name] = derive_specific_intention(target_item).text
            except SpecificIntentionUnavailable as exc:
                raise _Skip("no_categories") from exc
        elif name is SlotName.CandidateItems:
            values[name] = render_item_list([catalog.title(i) for i in attempt.candidates])
        elif name is SlotName.TargetItem:
            probe = attempt.probe_item if attempt.probe_item is not None else inst.target.item_id
            values[name] = catalog.title(probe)
    title = target_item.title
    if t.target == "Reasoning":
        output = cot_response(values[SlotName.ExplicitPreference], title)
    elif t.target_slot is not None and t.target == "QueryAndItem":
        output = query_and_item(values[t.target_slot], title)
    elif t.target_slot is not None:
        output = values[t.target_slot]
    elif t.target == "HistoryAndItem":
        output = history_and_item(values[SlotName.HistoricalInteractions], title)
    elif t.target in ("ExplicitPreference", "HistoricalInteractions"):
        output = values[SlotName(t.target)]
    else:
        output = title
    slots = {k: v for k, v in values.items() if k in t.slots}
    rendered = instantiate(t, slots, output, answer=attempt.answer)
    source = {
        "history": [e.item_id for e in inst.history],
        "target": inst.target.item_id,
        "review": inst.target.review_text or "",
    }
    if attempt.candidates:
        source["candidates"] = list(attempt.candidates)
    if attempt.probe_item is not None:
        source["probe"] = attempt.probe_item
    return InstructionInstance(rendered, inst.user_id, attempt.scenario.scenario_id, inst.part, attempt.seq, source)


@dataclass
class CorpusResult:
    instances: list[InstructionInstance]
    stats: CorpusStats
    config: GenerationConfig

    @property
    def partial(self) -> bool:
        return self.stats.partial

    def header(self) -> dict:
        return {
            "kind": "instruction-corpus",
            "purpose": self.config.purpose,
            "partial": self.partial,
            "config_digest": self.config.digest,
            "seed": self.config.seed,
            "n_instances": self.stats.n_instances,
        }

    def write(self, path: str | os.PathLike) -> Path:
        """Write the corpus and a ``.stats.json`` sibling; return the stats path."""
        path = Path(path)
        if self.config.purpose == "training" and any(i.split == "test" for i in self.instances):
            raise ValueError("test-split instance in a training corpus")
        jsonl.write_jsonl(path, (i.to_row() for i in self.instances), self.header())
        stats_path = path.with_suffix(".stats.json")
        tmp = stats_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.stats.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, stats_path)
        return stats_path


def assemble(
    plan: Sequence[PlannedAttempt],
    catalog: Catalog,
    client: AnnotationClient,
    config: GenerationConfig,
    fetched: PrefetchResult,
) -> CorpusResult:
    stats = CorpusStats()
    instances: list[InstructionInstance] = []
    for attempt in plan:
        reqs = teacher_requests(attempt, catalog, client, config)
        if any(isinstance(fetched.errors.get(r.digest), BudgetExhausted) for r in reqs.values()):
            stats.partial = True
            stats.skipped["budget_exhausted"] += len(plan) - attempt.seq
            break
        if attempt.unfillable:
            stats.skipped[attempt.unfillable] += 1
            continue
        if SlotName.VagueIntention in _needs(attempt.template) and SlotName.VagueIntention not in reqs:
            stats.skipped["no_review"] += 1
            continue
        if any(r.digest in fetched.errors for r in reqs.values()):
            stats.skipped["teacher_failure"] += 1
            continue
        texts = {name: fetched.texts[r.digest] for name, r in reqs.items()}
        try:
            instance = _fill(attempt, catalog, texts)
        except _Skip as exc:
            stats.skipped[str(exc)] += 1
            continue
        instances.append(instance)
        stats.add(instance)
    return CorpusResult(instances, stats, config)


def generate_corpus(
    catalog: Catalog,
    split: DatasetSplit,
    config: GenerationConfig,
    client: AnnotationClient,
    out_path: str | os.PathLike | None = None,
) -> CorpusResult:
    plan = plan_corpus(catalog, split, config)
    fetched = prefetch(plan, catalog, client, config)
    result = assemble(plan, catalog, client, config, fetched)
    if result.partial:
        log.warning("corpus truncated: upstream call budget exhausted")
    if out_path is not None:
        result.write(out_path)
    return result


def annotate(
    catalog: Catalog, split: DatasetSplit, config: GenerationConfig, client: AnnotationClient
) -> PrefetchResult:
    """Fill the annotation cache for every teacher slot the corpus will need."""
    return prefetch(plan_corpus(catalog, split, config), catalog, client, config)


def read_corpus(path: str | os.PathLike) -> tuple[dict | None, list[dict]]:
    return jsonl.read_jsonl(path)


__all__ = [
    "CorpusResult",
    "CorpusStats",
    "GenerationConfig",
    "PlannedAttempt",
    "PrefetchResult",
    "ScenarioSpec",
    "annotate",
    "assemble",
    "default_scenarios",
    "format_stats",
    "generate_corpus",
    "plan_corpus",
    "prefetch",
    "read_corpus",
    "requests_for",
    "teacher_requests",
]
