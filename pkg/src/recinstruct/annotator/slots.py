"""Fine-grained slot contents and the diversity transforms."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

from ..catalog import Catalog, ItemRecord, UserSequence
from ..templates import (
    QUERY_SLOTS,
    CoarseTemplate,
    RenderedInstruction,
    SlotName,
    SlotSource,
    Strategy,
    TemplateError,
    cot_response,
    find_template,
    instantiate,
    render_history,
)
from .teacher import AnnotationClient


class AnnotationError(Exception):
    pass


class SpecificIntentionUnavailable(AnnotationError):
    pass


class NotReversible(AnnotationError):
    pass


class SlotUnavailable(AnnotationError):
    """A slot cannot be filled for this user; the instance is skipped."""


@dataclass(frozen=True)
class SlotValue:
    text: str
    source: SlotSource


@dataclass(frozen=True)
class InstructionInstance:
    rendered: RenderedInstruction
    user_id: str
    scenario_id: str
    split: str
    seq: int = 0
    # raw inputs the slots came from: history item ids, target item id, review
    source: Mapping = field(default_factory=dict, compare=False)

    @property
    def kind(self) -> str:
        """``"intention"`` when an intention is involved, else ``"preference"``."""
        involved = set(self.rendered.slot_values) | {self.rendered.target_slot}
        if involved & {SlotName.VagueIntention, SlotName.SpecificIntention}:
            return "intention"
        return "preference"

    def to_row(self) -> dict:
        r = self.rendered
        return {
            "seq": self.seq,
            "instruction": r.instruction_text,
            "output": r.target_output,
            "aspects": r.aspects.as_dict(),
            "template_id": r.template_id,
            "strategy": r.strategy_tag.value,
            "scenario": self.scenario_id,
            "user": self.user_id,
            "split": self.split,
            "kind": self.kind,
            "provenance": {k.value: v.value for k, v in sorted(r.slot_provenance.items(), key=lambda kv: kv[0].value)},
            "source": dict(self.source),
        }


# -- slot producers ----------------------------------------------------------


def derive_implicit_preference(sequence: UserSequence, catalog: Catalog) -> SlotValue:
    if not sequence.events:
        raise ValueError("sequence must be non-empty")
    return SlotValue(render_history(sequence, catalog), SlotSource.FromHistory)


def preference_request(sequence: UserSequence, catalog: Catalog, client: AnnotationClient):
    if not sequence.events:
        raise ValueError("sequence must be non-empty")
    items = [catalog.items[e.item_id] for e in sequence.events]
    context = {
        "titles": [i.title for i in items],
        "leaf_categories": [i.categories[-1] if i.categories else "" for i in items],
    }
    return client.request("explicit_preference", context, history=render_history(sequence, catalog))


def generate_explicit_preference(
    sequence: UserSequence, catalog: Catalog, client: AnnotationClient
) -> SlotValue:
    """Teacher-written preference statement for a history (cached)."""
    text = client.complete(preference_request(sequence, catalog, client))
    return SlotValue(text, SlotSource.FromTeacher)


def intention_request(review_text: str, client: AnnotationClient, kind: str = "vague_intention"):
    if review_text is None or not review_text.strip():
        raise ValueError("review text must be non-empty")
    review = " ".join(review_text.split())
    return client.request(kind, {"review": review}, review=review)


def extract_vague_intention(
    review_text: str, client: AnnotationClient, kind: str = "vague_intention"
) -> SlotValue:
    text = client.complete(intention_request(review_text, client, kind))
    return SlotValue(text, SlotSource.FromReview)


def derive_specific_intention(item: ItemRecord) -> SlotValue:
    if not item.categories:
        raise SpecificIntentionUnavailable(f"item {item.item_id!r} has no categories")
    return SlotValue(", ".join(item.categories) + ".", SlotSource.FromCategories)


# -- diversity transforms ----------------------------------------------------


def _reversal_pairs() -> list[tuple[str, str]]:
    from ..templates import auxiliary_templates, builtin_registry

    pairs = []
    for t in [*builtin_registry(), *auxiliary_templates()]:
        for forward in t.reverses:
            pairs.append((forward, t.template_id))
    return pairs


def _variants_of(base_id: str) -> list[CoarseTemplate]:
    return find_template(base_id).variants()


def _reverse_output_slot(template: CoarseTemplate) -> SlotName | None:
    if template.target_slot is not None:
        return template.target_slot
    try:
        return SlotName(template.target)
    except ValueError:
        return None


def apply_task_reversal(instance: InstructionInstance) -> InstructionInstance:
    """Swap input and output roles using the template's registered counterpart."""
    r = instance.rendered
    template = find_template(r.template_id)
    base = template.base_id or template.template_id
    pairs = _reversal_pairs()
    values = dict(r.slot_values)

    forward_to = [rev for fwd, rev in pairs if fwd == base]
    backward_to = [fwd for fwd, rev in pairs if rev == base]

    if forward_to and template.target_schema.value == "TargetItemTitle":
        queries = [s for s in QUERY_SLOTS if s in values]
        if len(queries) != 1:
            raise NotReversible(f"{r.template_id}: expected exactly one query slot")
        q = queries[0]
        available = (set(values) - {q}) | {SlotName.TargetItem}
        inputs = {**values, SlotName.TargetItem: r.target_output}
        for rev in forward_to:
            for v in _variants_of(rev):
                if _reverse_output_slot(v) is q and v.slots <= available:
                    slots = {s: inputs[s] for s in v.slots}
                    return _reversed(instance, v, slots, values[q])
        raise NotReversible(f"{r.template_id}: no counterpart accepts its slots")

    if backward_to and r.target_slot in QUERY_SLOTS:
        q = r.target_slot
        item = values.get(SlotName.TargetItem)
        if item is None:
            raise NotReversible(f"{r.template_id}: no target item to recover")
        inputs = {k: v for k, v in values.items() if k is not SlotName.TargetItem}
        inputs[q] = r.target_output
        for fwd in backward_to:
            for v in _variants_of(fwd):
                if q in v.slots and SlotName.TargetItem not in v.slots and v.slots <= set(inputs):
                    slots = {s: inputs[s] for s in v.slots}
                    return _reversed(instance, v, slots, item)
        raise NotReversible(f"{r.template_id}: no counterpart accepts its slots")

    raise NotReversible(f"{r.template_id} has no reversed counterpart")


def _reversed(instance, template, slots, target) -> InstructionInstance:
    prov = {k: v for k, v in instance.rendered.slot_provenance.items() if k in slots}
    rendered = instantiate(template, slots, target, provenance=prov)
    return replace(instance, rendered=rendered)


def query_and_item(intention: str, title: str) -> str:
    return f"Query: {intention.strip()}\nProduct: {title}"


def history_and_item(history: str, title: str) -> str:
    return f"Previously purchased: {history}\nNext: {title}"


def _variant_for(base_id: str, query: SlotName) -> CoarseTemplate:
    for v in _variants_of(base_id):
        if query in v.slots or v.target_slot is query:
            return v
    raise SlotUnavailable(f"{base_id} has no variant for {query.value}")


def build_relatedness_pair(
    history: str | None,
    intention: SlotValue | None,
    intention_slot: SlotName,
    target_title: str,
    *,
    user_id: str = "",
    scenario_id: str = "",
    split: str = "train",
    source: Mapping | None = None,
) -> list[InstructionInstance]:
    """Intention->history and history->(intention, item) instances.

    Returns an empty list when either side is missing.
    """
    if not history or intention is None or not intention.text.strip():
        return []
    source = dict(source or {})
    meta = dict(user_id=user_id, scenario_id=scenario_id, split=split, source=source)
    out = []
    try:
        fwd = _variant_for("C07", intention_slot)
        out.append(InstructionInstance(
            instantiate(
                fwd,
                {intention_slot: intention.text, SlotName.TargetItem: target_title},
                history,
                provenance={intention_slot: intention.source},
            ),
            **meta,
        ))
    except SlotUnavailable:
        pass
    try:
        back = _variant_for("C08", intention_slot)
        out.append(InstructionInstance(
            instantiate(back, {SlotName.HistoricalInteractions: history},
                        query_and_item(intention.text, target_title)),
            **meta,
        ))
    except SlotUnavailable:
        pass
    return out


def build_cot_instance(
    history: str,
    explicit_preference: SlotValue | None,
    target_title: str,
    *,
    user_id: str = "",
    scenario_id: str = "",
    split: str = "train",
    source: Mapping | None = None,
) -> InstructionInstance | None:
    if explicit_preference is None or not explicit_preference.text.strip():
        return None
    template = find_template("A03")
    output = cot_response(explicit_preference.text, target_title)
    assert target_title in output, "CoT response must name the target item"
    rendered = instantiate(template, {SlotName.HistoricalInteractions: history}, output)
    if rendered.strategy_tag is not Strategy.CoT:
        raise TemplateError("A03 must be the CoT template")
    return InstructionInstance(rendered, user_id, scenario_id, split, source=dict(source or {}))
