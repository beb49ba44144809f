from __future__ import annotations

import re
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from recinstruct.catalog import Event, ItemRecord, UserSequence
from recinstruct.templates import (
    ARROW,
    AspectTags,
    EmptySlot,
    Intention,
    MissingSlot,
    NoTemplateError,
    Preference,
    SlotName,
    SlotSource,
    Strategy,
    TargetSchema,
    TaskForm,
    TemplateError,
    UnexpectedSlot,
    _substitute,
    all_variants,
    body_word_count,
    builtin_registry,
    cot_response,
    find_template,
    instantiate,
    placeholders,
    render_history,
    render_item_list,
    select_templates,
)

RE_HISTORY = (
    "1. Resident Evil: Revelations 2 - PlayStation 4 → "
    "2. Resident Evil 4 - PlayStation 4 Standard Edition"
)


def _fill(template, text="something"):
    return {s: f"{text} {s.value}" for s in template.slots}


def test_registry_size_and_categories():
    reg = builtin_registry()
    assert len(reg) == 39
    assert Counter(t.category for t in reg) == {"preference": 17, "intention": 9, "combined": 13}
    assert len({t.template_id for t in reg}) == 39


def test_mean_body_length():
    reg = builtin_registry()
    mean = sum(body_word_count(t.body) for t in reg) / len(reg)
    assert abs(mean - 41.4) <= 4.0


def test_body_word_count_counts_placeholders_once():
    assert body_word_count("Given {HistoricalInteractions}, pick {?ExplicitPreference} now") == 5


def test_no_builtin_template_is_pairwise():
    assert all(v.aspects.task_form is not TaskForm.T1_Pairwise for v in all_variants())


def test_select_exact_aspects():
    q = AspectTags(Preference.P1_Implicit, Intention.I0_None, TaskForm.T3_Reranking)
    out = select_templates(builtin_registry(), q)
    assert out
    assert all(t.aspects == q for t in out)
    assert [t.template_id for t in out] == sorted(t.template_id for t in out)


def test_select_pairwise_raises():
    with pytest.raises(NoTemplateError):
        select_templates(builtin_registry(), AspectTags.parse("P1,I1,T1"))


def test_select_includes_search_engine_template():
    out = select_templates(builtin_registry(), AspectTags.parse("P0,I2,T2"))
    assert any("Suppose you are a search engine" in t.body for t in out)


def test_select_strategy_filter():
    out = select_templates(builtin_registry(), AspectTags.parse("P1,I0,T2"), Strategy.CoT)
    assert [t.template_id for t in out] == ["A03"]


def test_aspect_parse_round_trip():
    a = AspectTags.parse("P2,I1,T3")
    assert str(a) == "P2,I1,T3"
    assert AspectTags.from_dict(a.as_dict()) == a


@pytest.mark.parametrize("v", all_variants(), ids=lambda v: v.template_id)
def test_variant_invariants(v):
    assert v.is_concrete
    names = placeholders(v.body)
    assert names == v.slots
    if v.aspects.preference is Preference.P1_Implicit:
        assert SlotName.HistoricalInteractions in names
    if v.aspects.task_form is TaskForm.T3_Reranking:
        assert SlotName.CandidateItems in names
    if v.aspects.task_form is TaskForm.T0_Pointwise:
        assert v.target_schema is TargetSchema.YesNo
    r = instantiate(v, _fill(v), "Target Title", answer=True)
    assert "{" not in r.instruction_text and "}" not in r.instruction_text
    assert set(r.slot_provenance) == names


def test_pointwise_instance():
    t = find_template("A11")
    r = instantiate(t, {SlotName.HistoricalInteractions: "1. A", SlotName.TargetItem: "X"}, "X", answer=True)
    assert r.instruction_text.endswith("will interact with X next?")
    assert r.target_output == "Yes"
    no = instantiate(t, {SlotName.HistoricalInteractions: "1. A", SlotName.TargetItem: "X"}, "X", answer=False)
    assert no.target_output == "No"


def test_pointwise_needs_answer():
    t = find_template("A11")
    with pytest.raises(TemplateError):
        instantiate(t, {SlotName.HistoricalInteractions: "1. A", SlotName.TargetItem: "X"}, "X")


def test_missing_slot():
    t = select_templates(builtin_registry(), AspectTags.parse("P1,I0,T3"))[0]
    slots = _fill(t)
    del slots[SlotName.CandidateItems]
    with pytest.raises(MissingSlot) as exc:
        instantiate(t, slots, "X")
    assert exc.value.name is SlotName.CandidateItems


def test_unexpected_and_empty_slot():
    t = find_template("B02")
    with pytest.raises(UnexpectedSlot):
        instantiate(t, {SlotName.SpecificIntention: "PC.", SlotName.HistoricalInteractions: "1. A"}, "X")
    with pytest.raises(EmptySlot):
        instantiate(t, {SlotName.SpecificIntention: "  "}, "X")


def test_unresolved_markup_rejected():
    with pytest.raises(TemplateError):
        instantiate(find_template("B01"), {}, "X")


def test_cot_target_output():
    out = cot_response("preference for horror games.", "Resident Evil 4")
    assert out == (
        "According to the user's historical interactions, we can infer his preference for horror games. "
        "Finally, we recommend him Resident Evil 4."
    )


def test_instantiate_is_pure():
    t = find_template("C10.I1+P2")
    slots = _fill(t)
    assert instantiate(t, slots, "X") == instantiate(t, slots, "X")
    assert instantiate(t, slots, "X").instruction_text == instantiate(t, dict(slots), "X").instruction_text


def test_provenance_override():
    t = find_template("B02")
    r = instantiate(t, {SlotName.SpecificIntention: "PC."}, "X")
    assert r.slot_provenance == {SlotName.SpecificIntention: SlotSource.FromCategories}


def test_reversal_template_target_slot():
    t = find_template("X01")
    r = instantiate(t, {SlotName.TargetItem: "Gaming Mouse"}, "I want a mouse.")
    assert r.instruction_text.startswith("The user wants to buy: Gaming Mouse, but")
    assert r.strategy_tag is Strategy.TaskReversal


# -- punctuation at slot seams ----------------------------------------------


@pytest.mark.parametrize(
    "body, value, expected",
    [
        ("a {ExplicitPreference}. b", "He likes games.", "a He likes games. b"),
        ("a {ExplicitPreference}. b", "Really?", "a Really? b"),
        ("a {ExplicitPreference}, b", "Video Games, PC.", "a Video Games, PC, b"),
        ("a {ExplicitPreference} , b", "x", "a x, b"),
        ("a {ExplicitPreference} b", "x.", "a x b"),
        ("a {ExplicitPreference} B", "x.", "a x. B"),
        ("a {ExplicitPreference}. b", "x", "a x. b"),
    ],
)
def test_substitute_merges_punctuation(body, value, expected):
    assert _substitute(body, SlotName.ExplicitPreference, value) == expected


# -- rendering ---------------------------------------------------------------


def test_render_item_list():
    assert render_item_list(["A"]) == "1. A"
    assert render_item_list(["A", "B"]) == "1. A\n2. B"
    assert render_item_list([ItemRecord("x", "Multi\nline\n title", ())]) == "1. Multi line title"
    with pytest.raises(ValueError):
        render_item_list([])


def test_render_history_resident_evil(re_catalog):
    seq = UserSequence("A1", (Event("B00RE2", 100), Event("B00RE4", 200)))
    assert render_history(seq, re_catalog) == RE_HISTORY


def test_render_history_single_and_unknown(re_catalog):
    assert render_history(UserSequence("u", (Event("B00RE4", 1),)), re_catalog) == (
        "1. Resident Evil 4 - PlayStation 4 Standard Edition"
    )
    with pytest.raises(KeyError):
        render_history(UserSequence("u", (Event("nope", 1),)), re_catalog)
    with pytest.raises(ValueError):
        render_history(UserSequence("u", ()), re_catalog)


@given(st.lists(st.text(alphabet="abcxyz ", min_size=1).filter(str.strip), min_size=1, max_size=20))
def test_render_history_length(titles):
    from recinstruct.catalog import Catalog

    items = {f"i{n}": ItemRecord(f"i{n}", t, ()) for n, t in enumerate(titles)}
    seq = UserSequence("u", tuple(Event(f"i{n}", n) for n in range(len(titles))))
    text = render_history(seq, Catalog(items, ()))
    assert text.count(ARROW) == len(titles) - 1
    assert re.findall(r"(?:^| → )(\d+)\. ", text) == [str(n) for n in range(1, len(titles) + 1)]
