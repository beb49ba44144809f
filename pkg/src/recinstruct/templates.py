"""Instruction-format taxonomy, the built-in coarse templates, and slot filling.

Template bodies live in ``data/coarse_templates.jsonl`` and are verified
against ``data/templates.manifest.json`` on load. A stored body may carry two
kinds of markup besides plain ``{Slot}`` placeholders:

* ``{ExplicitPreference|VagueIntention|SpecificIntention}`` -- the query slot,
  one of the listed kinds;
* ``{?ExplicitPreference}`` -- an optional slot.

:meth:`CoarseTemplate.variants` resolves the markup into concrete templates,
each carrying exactly one aspect triple.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .catalog import Catalog, ItemRecord, UserSequence

ARROW = " → "


class Preference(enum.Enum):
    P0_None = "P0"
    P1_Implicit = "P1"
    P2_Explicit = "P2"


class Intention(enum.Enum):
    I0_None = "I0"
    I1_Vague = "I1"
    I2_Specific = "I2"


class TaskForm(enum.Enum):
    T0_Pointwise = "T0"
    T1_Pairwise = "T1"
    T2_Matching = "T2"
    T3_Reranking = "T3"


@dataclass(frozen=True, order=True)
class AspectTags:
    preference: Preference
    intention: Intention
    task_form: TaskForm

    @classmethod
    def parse(cls, text: str) -> AspectTags:
        """``"P1,I0,T3"`` -> AspectTags."""
        p, i, t = (s.strip() for s in text.split(","))
        return cls(Preference(p), Intention(i), TaskForm(t))

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> AspectTags:
        return cls(Preference(d["p"]), Intention(d["i"]), TaskForm(d["t"]))

    def as_dict(self) -> dict[str, str]:
        return {"p": self.preference.value, "i": self.intention.value, "t": self.task_form.value}

    def __str__(self) -> str:
        return f"{self.preference.value},{self.intention.value},{self.task_form.value}"


class SlotName(enum.Enum):
    HistoricalInteractions = "HistoricalInteractions"
    ExplicitPreference = "ExplicitPreference"
    VagueIntention = "VagueIntention"
    SpecificIntention = "SpecificIntention"
    CandidateItems = "CandidateItems"
    TargetItem = "TargetItem"


class SlotSource(enum.Enum):
    FromHistory = "FromHistory"
    FromTeacher = "FromTeacher"
    FromCategories = "FromCategories"
    FromReview = "FromReview"
    FromCandidateSampler = "FromCandidateSampler"
    FromTargetItem = "FromTargetItem"


DEFAULT_SOURCES = {
    SlotName.HistoricalInteractions: SlotSource.FromHistory,
    SlotName.ExplicitPreference: SlotSource.FromTeacher,
    SlotName.VagueIntention: SlotSource.FromReview,
    SlotName.SpecificIntention: SlotSource.FromCategories,
    SlotName.CandidateItems: SlotSource.FromCandidateSampler,
    SlotName.TargetItem: SlotSource.FromTargetItem,
}

QUERY_SLOTS = (SlotName.ExplicitPreference, SlotName.VagueIntention, SlotName.SpecificIntention)
_QUERY_CODE = {
    SlotName.ExplicitPreference: "P2",
    SlotName.VagueIntention: "I1",
    SlotName.SpecificIntention: "I2",
}


class Strategy(enum.Enum):
    Plain = "Plain"
    TaskReversal = "TaskReversal"
    Relatedness = "Relatedness"
    CoT = "CoT"


class TargetSchema(enum.Enum):
    TargetItemTitle = "TargetItemTitle"
    YesNo = "YesNo"
    ReasoningThenItem = "ReasoningThenItem"
    FreeTextInference = "FreeTextInference"


COT_RESPONSE = (
    "According to the user's historical interactions, we can infer his {preference}. "
    "Finally, we recommend him {target}."
)


class TemplateError(Exception):
    pass


class TemplateDataError(TemplateError):
    pass


class NoTemplateError(TemplateError):
    def __init__(self, aspects: AspectTags):
        super().__init__(f"no template for scenario {aspects}")
        self.aspects = aspects


class SlotError(TemplateError):
    def __init__(self, name: SlotName):
        super().__init__(f"{type(self).__name__}({name.value})")
        self.name = name


class MissingSlot(SlotError):
    pass


class UnexpectedSlot(SlotError):
    pass


class EmptySlot(SlotError):
    pass


_PLACEHOLDER = re.compile(r"\{(\??)([A-Za-z|]+)\}")


def placeholders(body: str) -> set[SlotName]:
    """Slot names referenced by a concrete body."""
    names = set()
    for opt, name in _PLACEHOLDER.findall(body):
        if opt or "|" in name:
            raise TemplateError(f"body still carries markup {{{opt}{name}}}")
        names.add(SlotName(name))
    return names


def _derive_aspects(body: str, task_form: TaskForm) -> AspectTags:
    names = placeholders(body)
    if SlotName.ExplicitPreference in names:
        p = Preference.P2_Explicit
    elif SlotName.HistoricalInteractions in names:
        p = Preference.P1_Implicit
    else:
        p = Preference.P0_None
    if SlotName.SpecificIntention in names:
        i = Intention.I2_Specific
    elif SlotName.VagueIntention in names:
        i = Intention.I1_Vague
    else:
        i = Intention.I0_None
    return AspectTags(p, i, task_form)


_GAP = "\x00"
# punctuation repairs applied only around the removed optional slot
_GAP_FIXES = (
    (re.compile(r"\.\s*\x00\s*\."), "."),
    (re.compile(r"\s*\x00\s*\."), "."),
    (re.compile(r":\s*\x00,\s*"), ": "),
    (re.compile(r":\s*\x00\s+(?=[A-Z])"), ". "),
    (re.compile(r"\s*\x00"), ""),
)


def _drop_optional(body: str) -> str:
    body = re.sub(r"\{\?[A-Za-z]+\}", _GAP, body)
    for pattern, repl in _GAP_FIXES:
        body = pattern.sub(repl, body)
    return body


@dataclass(frozen=True)
class CoarseTemplate:
    template_id: str
    aspects: AspectTags
    strategy_tag: Strategy
    body: str
    target_schema: TargetSchema
    category: str = ""
    # what a FreeTextInference target holds: a SlotName value, "Query",
    # "QueryAndItem" or "HistoryAndItem"
    target: str = "TargetItem"
    target_options: tuple[SlotName, ...] = ()
    reverses: tuple[str, ...] = ()
    base_id: str = ""
    # query kind the target stands for, set on concrete variants
    target_slot: SlotName | None = None

    @property
    def is_concrete(self) -> bool:
        return not re.search(r"\{\?|\|", self.body)

    @property
    def slots(self) -> set[SlotName]:
        return placeholders(self.body)

    def query_options(self) -> tuple[SlotName, ...]:
        m = re.search(r"\{([A-Za-z]+(?:\|[A-Za-z]+)+)\}", self.body)
        if m:
            return tuple(SlotName(s) for s in m.group(1).split("|"))
        return self.target_options

    def variants(self) -> list[CoarseTemplate]:
        """Concrete templates, one per (query kind, optional slot) choice."""
        base = self.base_id or self.template_id
        alternation = re.search(r"\{[A-Za-z]+(?:\|[A-Za-z]+)+\}", self.body)
        options: Sequence[SlotName | None] = self.query_options() or (None,)
        optional = re.search(r"\{\?([A-Za-z]+)\}", self.body)
        out = []
        for q in options:
            body = self.body
            if alternation and q is not None:
                body = body.replace(alternation.group(0), "{" + q.value + "}")
            choices = [False, True] if optional else [False]
            for with_optional in choices:
                if optional and with_optional:
                    opt_slot = SlotName(optional.group(1))
                    if opt_slot in placeholders(_drop_optional(body)):
                        continue  # same slot already present as the query
                    concrete = body.replace(optional.group(0), "{" + opt_slot.value + "}")
                else:
                    concrete = _drop_optional(body)
                suffix = ""
                if q is not None:
                    suffix += "." + _QUERY_CODE[q]
                if with_optional:
                    suffix += "+" + _QUERY_CODE[SlotName(optional.group(1))]
                target_slot = q if self.target in ("Query", "QueryAndItem") else None
                out.append(
                    replace(
                        self,
                        template_id=base + suffix,
                        body=concrete,
                        aspects=_derive_aspects(concrete, self.aspects.task_form),
                        base_id=base,
                        target_slot=target_slot,
                    )
                )
        return out


@dataclass(frozen=True)
class RenderedInstruction:
    instruction_text: str
    target_output: str
    aspects: AspectTags
    template_id: str
    slot_provenance: Mapping[SlotName, SlotSource]
    slot_values: Mapping[SlotName, str] = field(default_factory=dict, compare=False)
    strategy_tag: Strategy = Strategy.Plain
    # slot whose content the target output carries
    target_slot: SlotName | None = SlotName.TargetItem

    def __post_init__(self):
        if "{" in self.instruction_text or "}" in self.instruction_text:
            raise TemplateError("placeholder leaked into rendered instruction")
        if not self.target_output.strip():
            raise TemplateError("target_output must be non-empty")


# -- registry ----------------------------------------------------------------


def _template_from_row(row: dict) -> CoarseTemplate:
    return CoarseTemplate(
        template_id=row["id"],
        aspects=AspectTags.from_dict(row["aspects"]),
        strategy_tag=Strategy(row["strategy"]),
        body=row["body"],
        target_schema=TargetSchema(row["target_schema"]),
        category=row.get("category", ""),
        target=row.get("target", "TargetItem"),
        target_options=tuple(SlotName(s) for s in row.get("target_options", ())),
        reverses=tuple(row.get("reverses", ())),
    )


def _load_file(name: str) -> list[CoarseTemplate]:
    data_dir = resources.files("recinstruct") / "data"
    manifest = json.loads((data_dir / "templates.manifest.json").read_text(encoding="utf-8"))
    raw = (data_dir / name).read_bytes()
    expected = manifest["files"].get(name)
    actual = hashlib.sha256(raw).hexdigest()
    if expected != actual:
        raise TemplateDataError(f"{name}: checksum {actual} does not match manifest {expected}")
    templates = [_template_from_row(json.loads(line)) for line in raw.decode("utf-8").splitlines() if line]
    for t in templates:
        _check_template(t)
    return templates


def _check_template(t: CoarseTemplate) -> None:
    first = t.variants()[0]
    if first.aspects != t.aspects:
        raise TemplateDataError(f"{t.template_id}: stored aspects {t.aspects} != derived {first.aspects}")
    for v in t.variants():
        names = v.slots
        if v.aspects.preference is Preference.P1_Implicit and SlotName.HistoricalInteractions not in names:
            raise TemplateDataError(f"{v.template_id}: P1 without history")
        if v.aspects.task_form is TaskForm.T3_Reranking and SlotName.CandidateItems not in names:
            raise TemplateDataError(f"{v.template_id}: T3 without candidates")
        if v.aspects.task_form is TaskForm.T0_Pointwise and v.target_schema is not TargetSchema.YesNo:
            raise TemplateDataError(f"{v.template_id}: T0 must answer Yes/No")


@functools.lru_cache(maxsize=None)
def _registry() -> tuple[CoarseTemplate, ...]:
    return tuple(_load_file("coarse_templates.jsonl"))


@functools.lru_cache(maxsize=None)
def _auxiliary() -> tuple[CoarseTemplate, ...]:
    return tuple(_load_file("auxiliary_templates.jsonl"))


def builtin_registry() -> list[CoarseTemplate]:
    """The 39 coarse-grained templates, in file order."""
    return list(_registry())


def auxiliary_templates() -> list[CoarseTemplate]:
    """Strategy templates that are not part of the 39-template registry."""
    return list(_auxiliary())


def all_variants(registry: Iterable[CoarseTemplate] | None = None) -> list[CoarseTemplate]:
    if registry is None:
        registry = _registry()
    return [v for t in registry for v in t.variants()]


def find_template(template_id: str, registry: Iterable[CoarseTemplate] | None = None) -> CoarseTemplate:
    pool = list(registry) if registry is not None else [*_registry(), *_auxiliary()]
    for t in pool:
        # a concrete variant wins over a base that still carries markup
        for v in t.variants():
            if v.template_id == template_id:
                return v
        if t.template_id == template_id:
            return t
    raise KeyError(template_id)


def body_word_count(body: str) -> int:
    # each placeholder, markup included, counts as one word
    return len(_PLACEHOLDER.sub("SLOT", body).split())


def select_templates(
    registry: Iterable[CoarseTemplate],
    aspects: AspectTags,
    strategy: Strategy | None = None,
) -> list[CoarseTemplate]:
    """Concrete templates whose aspect triple equals ``aspects`` exactly."""
    out = [
        v for v in all_variants(registry)
        if v.aspects == aspects and (strategy is None or v.strategy_tag is strategy)
    ]
    if not out:
        raise NoTemplateError(aspects)
    return sorted(out, key=lambda v: v.template_id)


# -- rendering ---------------------------------------------------------------


def _one_line(text: str) -> str:
    return " ".join(text.split())


def render_item_list(items: Sequence[ItemRecord | str]) -> str:
    if not items:
        raise ValueError("candidate list must be non-empty")
    titles = [i.title if isinstance(i, ItemRecord) else i for i in items]
    return "\n".join(f"{n}. {_one_line(t)}" for n, t in enumerate(titles, start=1))


def render_titles(titles: Sequence[str]) -> str:
    if not titles:
        raise ValueError("history must be non-empty")
    return ARROW.join(f"{n}. {_one_line(t)}" for n, t in enumerate(titles, start=1))


def render_history(sequence: UserSequence, catalog: Catalog) -> str:
    """Arrow-joined numbered titles, oldest first."""
    if not sequence.events:
        raise ValueError("sequence must be non-empty")
    titles = []
    for e in sequence.events:
        if e.item_id not in catalog.items:
            raise KeyError(f"item {e.item_id!r} missing from catalog")
        titles.append(catalog.items[e.item_id].title)
    return render_titles(titles)


def instantiate(
    template: CoarseTemplate,
    slots: Mapping[SlotName, str],
    target: str,
    *,
    answer: bool | None = None,
    provenance: Mapping[SlotName, SlotSource] | None = None,
) -> RenderedInstruction:
    """Fill a concrete template.

    ``target`` becomes the target output verbatim, except for Yes/No
    templates where ``answer`` decides it. ``slots`` must cover exactly the
    placeholders of the body.
    """
    if not template.is_concrete:
        raise TemplateError(f"{template.template_id} has unresolved markup; use a variant")
    needed = template.slots
    for name in sorted(needed, key=lambda s: s.value):
        if name not in slots:
            raise MissingSlot(name)
    for name in slots:
        if name not in needed:
            raise UnexpectedSlot(name)
    for name, text in slots.items():
        if not text or not text.strip():
            raise EmptySlot(name)

    text = template.body
    for name, value in slots.items():
        text = _substitute(text, name, value)

    schema = template.target_schema
    if schema is TargetSchema.YesNo:
        if answer is None:
            raise TemplateError("Yes/No template needs an answer")
        output = "Yes" if answer else "No"
    else:
        output = target
    if not output or not output.strip():
        raise TemplateError("target must be non-empty")

    prov = {name: DEFAULT_SOURCES[name] for name in slots}
    if provenance:
        prov.update({k: v for k, v in provenance.items() if k in slots})
    if schema is TargetSchema.FreeTextInference:
        target_slot = template.target_slot or _target_slot_name(template.target)
    else:
        target_slot = SlotName.TargetItem
    return RenderedInstruction(
        instruction_text=text,
        target_output=output,
        aspects=template.aspects,
        template_id=template.template_id,
        slot_provenance=prov,
        slot_values=dict(slots),
        strategy_tag=template.strategy_tag,
        target_slot=target_slot,
    )


def _substitute(body: str, name: SlotName, value: str) -> str:
    """Replace a placeholder, merging punctuation at the seam.

    A value ending in a period swallows the template's own period and loses
    its period before ``,;:`` or a lowercase word; a space between
    placeholder and punctuation is dropped.
    """
    pattern = re.compile(r"\{" + name.value + r"\}( ?)([.,;:]?)")

    def repl(m: re.Match) -> str:
        space, punct = m.groups()
        if not punct:
            # "... Deluxe. and then" reads as one sentence
            nxt = m.string[m.end() : m.end() + 1]
            if space and nxt.islower() and value.endswith("."):
                return value[:-1] + space
            return value + space
        if punct == "." and value.endswith((".", "!", "?")):
            return value
        if punct != "." and value.endswith("."):
            return value[:-1] + punct
        return value + punct

    return pattern.sub(repl, body)


def _target_slot_name(target: str) -> SlotName | None:
    try:
        return SlotName(target)
    except ValueError:
        return None


_PREFERS = re.compile(r"^(?:he|she|they|the user) prefers? ", re.IGNORECASE)


def cot_response(preference: str, target_title: str) -> str:
    """Reasoning-then-item answer; "He prefers X." reads as "his preference for X"."""
    preference = preference.strip().rstrip(".")
    preference = _PREFERS.sub("preference for ", preference)
    return COT_RESPONSE.format(preference=preference, target=target_title)
