"""Command-line pipeline driven by one JSON config file.

Exit codes: 0 success, 1 runtime failure, 2 invalid config or usage,
3 corpus truncated by the call budget, 4 an evaluation marked invalid,
5 output directory locked by another command.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import __version__, jsonl
from .annotator import audit as audit_mod
from .annotator.corpus import (
    GenerationConfig,
    ScenarioSpec,
    assemble,
    default_scenarios,
    format_stats,
    plan_corpus,
    prefetch,
    requests_for,
)
from .annotator.teacher import (
    AnnotationCache,
    AnnotationClient,
    DeterministicTeacher,
    FixtureTeacher,
    HTTPTeacher,
    PromptSet,
    save_fixture,
)
from .catalog import (
    CatalogError,
    SplitKind,
    build_sequences,
    ingest,
    kcore_filter,
    leave_one_out_split,
    load_catalog,
    product_search_split,
    save_catalog,
    sequences_from_rows,
    sequences_to_rows,
    split_from_rows,
    split_to_rows,
)
from .evaluation import (
    EvalScenario,
    EvaluationError,
    PoolSpec,
    evaluable_templates,
    evaluate_scenario,
    grouped_evaluation,
    heldout_scenario_run,
    read_curve,
    template_selection_on_validation,
    write_curve,
    write_manifest,
)
from .matcher import PoolKind, RetrieverIndex, build_retriever_index
from .scorer import (
    ConstantProbScorer,
    FixtureScorer,
    LexicalScorer,
    OracleScorer,
    RandomScorer,
    RecordingScorer,
    RemoteScorer,
    Scorer,
    ScorerError,
)
from .templates import AspectTags, TemplateError

log = logging.getLogger("recinstruct")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_PARTIAL, EXIT_INVALID, EXIT_LOCKED = 0, 1, 2, 3, 4, 5

TEACHER_KEY_ENV = "RECINSTRUCT_TEACHER_API_KEY"
SCORER_KEY_ENV = "RECINSTRUCT_SCORER_API_KEY"

TEACHER_BACKENDS = ("deterministic", "fixture", "live")
SCORER_BACKENDS = (
    "lexical", "mock-oracle", "mock-inverse-oracle", "mock-random", "mock-constant", "remote", "fixture",
)
SPLIT_KINDS = ("LeaveOneOut", "ProductSearch801010", "both")


class ConfigError(Exception):
    def __init__(self, problems: Sequence[str]):
        super().__init__("\n".join(problems))
        self.problems = list(problems)


class Locked(Exception):
    pass


# -- config ------------------------------------------------------------------


@dataclass
class RunConfig:
    raw: dict
    base: Path

    @property
    def output_dir(self) -> Path:
        return self.path(self.raw.get("output_dir", "out"))

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else (self.base / q)

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name) or {})


def _check(problems: list[str], cond: bool, where: str, msg: str) -> None:
    if not cond:
        problems.append(f"{where}: {msg}")


def _int(problems, d, key, where, *, required=False, minimum=None):
    if key not in d:
        _check(problems, not required, f"{where}.{key}", "is required")
        return
    v = d[key]
    if not isinstance(v, int) or isinstance(v, bool):
        problems.append(f"{where}.{key}: must be an integer")
    elif minimum is not None and v < minimum:
        problems.append(f"{where}.{key}: must be >= {minimum}")


def _scenarios(problems, rows, where, *, quota: bool):
    if not isinstance(rows, list) or not rows:
        problems.append(f"{where}: must be a non-empty list")
        return
    for i, s in enumerate(rows):
        w = f"{where}[{i}]"
        if not isinstance(s, dict):
            problems.append(f"{w}: must be an object")
            continue
        _check(problems, isinstance(s.get("scenario_id"), str) and s.get("scenario_id"), f"{w}.scenario_id",
               "must be a non-empty string")
        try:
            AspectTags.parse(s.get("aspects", ""))
        except (ValueError, KeyError, AttributeError):
            problems.append(f"{w}.aspects: must look like 'P1,I0,T2'")
        if quota:
            _int(problems, s, "quota", w, required=True, minimum=0)


def validate(raw: Any, base: Path) -> RunConfig:
    """Check the whole document and report every problem with its field path."""
    p: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    cfg = RunConfig(raw, base)
    ds = raw.get("dataset")
    if not isinstance(ds, dict):
        p.append("dataset: is required")
    else:
        for key in ("interactions", "metadata"):
            v = ds.get(key)
            if not isinstance(v, str):
                p.append(f"dataset.{key}: is required")
            elif not cfg.path(v).is_file():
                p.append(f"dataset.{key}: file not found: {cfg.path(v)}")
        _int(p, ds, "k", "dataset", minimum=1)
        _int(p, ds, "max_len", "dataset", minimum=1)
    sp = raw.get("split", {})
    if not isinstance(sp, dict):
        p.append("split: must be an object")
    else:
        _check(p, sp.get("kind", "LeaveOneOut") in SPLIT_KINDS, "split.kind", f"must be one of {SPLIT_KINDS}")
        if sp.get("kind") in ("ProductSearch801010", "both"):
            _int(p, sp, "seed", "split", required=True)
    te = raw.get("teacher", {})
    if not isinstance(te, dict):
        p.append("teacher: must be an object")
    else:
        backend = te.get("backend", "deterministic")
        _check(p, backend in TEACHER_BACKENDS, "teacher.backend", f"must be one of {TEACHER_BACKENDS}")
        if backend == "fixture":
            f = te.get("fixture")
            _check(p, isinstance(f, str) and cfg.path(f).is_file(), "teacher.fixture",
                   "must name an existing fixture file")
        if backend == "live":
            _check(p, isinstance(te.get("endpoint"), str), "teacher.endpoint", "is required for a live teacher")
        if "prompts" in te:
            _check(p, cfg.path(str(te["prompts"])).is_file(), "teacher.prompts", "file not found")
        _int(p, te, "concurrency", "teacher", minimum=1)
        if te.get("max_upstream_calls") is not None:
            _int(p, te, "max_upstream_calls", "teacher", minimum=0)
    co = raw.get("corpus")
    if co is not None:
        if not isinstance(co, dict):
            p.append("corpus: must be an object")
        else:
            _int(p, co, "seed", "corpus", required=True)
            if "scenarios" in co:
                _scenarios(p, co["scenarios"], "corpus.scenarios", quota=True)
            _int(p, co, "n_candidates", "corpus", minimum=2)
            _check(p, co.get("purpose", "training") in ("training", "evaluation"), "corpus.purpose",
                   "must be 'training' or 'evaluation'")
    au = raw.get("audit")
    if au is not None:
        _int(p, au, "seed", "audit", required=True)
        _int(p, au, "n_per_kind", "audit", minimum=1)
    sc = raw.get("scorer", {})
    if not isinstance(sc, dict):
        p.append("scorer: must be an object")
    else:
        _scorer_problems(p, sc, cfg, "scorer")
    ev = raw.get("eval")
    if ev is not None:
        if not isinstance(ev, dict):
            p.append("eval: must be an object")
        else:
            _int(p, ev, "seed", "eval", required=True)
            if "scenarios" in ev:
                _scenarios(p, ev["scenarios"], "eval.scenarios", quota=False)
            pool = ev.get("pool", {})
            _check(p, pool.get("kind", "UniformRandom") in [k.value for k in PoolKind], "eval.pool.kind",
                   f"must be one of {[k.value for k in PoolKind]}")
            _int(p, pool, "n_negatives", "eval.pool", minimum=1)
            _int(p, pool, "window", "eval.pool", minimum=1)
            _check(p, ev.get("part", "test") in ("validation", "test"), "eval.part",
                   "must be 'validation' or 'test'")
            curve = ev.get("curve")
            if curve is not None:
                _check(p, isinstance(curve.get("subsets"), list) and curve["subsets"], "eval.curve.subsets",
                       "must be a non-empty list")
                _check(p, isinstance(curve.get("fixtures", {}), dict), "eval.curve.fixtures",
                       "must map subset ids to fixture files")
                if "heldout" in curve:
                    _scenarios(p, [curve["heldout"]], "eval.curve.heldout", quota=False)
    if p:
        raise ConfigError(p)
    return cfg


def _scorer_problems(p, sc, cfg, where):
    backend = sc.get("backend", "lexical")
    _check(p, backend in SCORER_BACKENDS, f"{where}.backend", f"must be one of {SCORER_BACKENDS}")
    if backend == "remote":
        _check(p, isinstance(sc.get("endpoint"), str), f"{where}.endpoint", "is required for a remote scorer")
    if backend == "fixture":
        f = sc.get("fixture")
        _check(p, isinstance(f, str) and cfg.path(f).is_file(), f"{where}.fixture",
               "must name an existing fixture file")
    if backend == "mock-random":
        _int(p, sc, "seed", where, required=True)
    if backend == "mock-constant":
        v = sc.get("p")
        _check(p, isinstance(v, (int, float)) and 0 < v <= 1, f"{where}.p", "must be in (0, 1]")


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"<config>: file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<config>: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"]) from None
    return validate(raw, path.parent.resolve())


# -- plumbing ----------------------------------------------------------------


class OutputLock:
    """Exclusive lock file in the output directory."""

    def __init__(self, directory: Path):
        self.path = directory / ".lock"
        self.held = False

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            owner = self.path.read_text().strip() if self.path.exists() else "?"
            raise Locked(f"{self.path} is held by pid {owner}; remove it if that process is gone") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self.held = True
        return self

    def __exit__(self, *exc):
        if self.held:
            self.path.unlink(missing_ok=True)


def _stage_path(out: Path, stage: str) -> Path:
    return out / ".stages" / f"{stage}.json"


def stage_current(out: Path, stage: str, key: str) -> bool:
    """True when the stage ran with the same inputs and its outputs are intact."""
    marker = _stage_path(out, stage)
    if not marker.exists():
        return False
    data = json.loads(marker.read_text())
    if data.get("key") != key:
        return False
    for rel, d in data.get("outputs", {}).items():
        f = out / rel
        if not f.exists() or jsonl.file_digest(f) != d:
            return False
    return True


def mark_stage(out: Path, stage: str, key: str, outputs: Sequence[Path]) -> None:
    marker = _stage_path(out, stage)
    marker.parent.mkdir(parents=True, exist_ok=True)
    data = {"key": key, "outputs": {str(o.relative_to(out)): jsonl.file_digest(o) for o in outputs}}
    tmp = marker.with_suffix(".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, marker)


def _write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise CatalogError(f"{path} is missing; run `recinstruct {stage}` first")
    return path


def _load_sequences(out: Path):
    _, rows = jsonl.read_jsonl(_require(out / "sequences.jsonl", "ingest"))
    return sequences_from_rows(rows)


def _load_loo(out: Path):
    seqs = _load_sequences(out)
    _, rows = jsonl.read_jsonl(_require(out / "split_loo.jsonl", "split"))
    return split_from_rows(rows, SplitKind.LeaveOneOut, {s.user_id: s for s in seqs})


def _teacher(cfg: RunConfig):
    te = cfg.section("teacher")
    backend = te.get("backend", "deterministic")
    if backend == "fixture":
        return FixtureTeacher.load(cfg.path(te["fixture"]))
    if backend == "live":
        return HTTPTeacher(te["endpoint"], api_key=os.environ.get(TEACHER_KEY_ENV))
    return DeterministicTeacher()


def _client(cfg: RunConfig, *, offline: bool = False, teacher=None) -> AnnotationClient:
    te = cfg.section("teacher")
    prompts = PromptSet.load(cfg.path(te["prompts"])) if "prompts" in te else PromptSet.load()
    return AnnotationClient(
        teacher if teacher is not None else _teacher(cfg),
        AnnotationCache(cfg.output_dir / "cache"),
        prompts=prompts,
        max_upstream_calls=te.get("max_upstream_calls"),
        offline=offline,
    )


def _generation_config(cfg: RunConfig) -> GenerationConfig:
    co = cfg.section("corpus")
    te = cfg.section("teacher")
    scenarios = (
        tuple(ScenarioSpec.from_dict(s) for s in co["scenarios"]) if "scenarios" in co
        else default_scenarios(co.get("quota", 10))
    )
    purpose = co.get("purpose", "training")
    return GenerationConfig(
        scenarios=scenarios,
        seed=co.get("seed", 0),
        purpose=purpose,
        splits=tuple(co.get("splits", ["train"])),
        n_candidates=co.get("n_candidates", 10),
        concurrency=te.get("concurrency", 4),
        max_upstream_calls=te.get("max_upstream_calls"),
        intention_kind=co.get("intention_kind", "vague_intention"),
    )


def build_scorer(sc: Mapping, cfg: RunConfig) -> Scorer:
    backend = sc.get("backend", "lexical")
    if backend == "lexical":
        return LexicalScorer()
    if backend == "mock-oracle":
        return OracleScorer()
    if backend == "mock-inverse-oracle":
        return OracleScorer(inverse=True)
    if backend == "mock-random":
        return RandomScorer(sc.get("seed", 0))
    if backend == "mock-constant":
        return ConstantProbScorer(sc["p"])
    if backend == "fixture":
        return FixtureScorer.load(cfg.path(sc["fixture"]))
    if backend == "remote":
        return RemoteScorer(sc["endpoint"], api_key=os.environ.get(SCORER_KEY_ENV))
    raise ConfigError([f"scorer.backend: unknown backend {backend!r}"])


# -- commands ----------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, args) -> int:
    ds = cfg.section("dataset")
    out = cfg.output_dir
    inter, meta = cfg.path(ds["interactions"]), cfg.path(ds["metadata"])
    k, max_len = ds.get("k", 5), ds.get("max_len", 20)
    key = jsonl.digest("ingest", ds, jsonl.file_digest(inter), jsonl.file_digest(meta))
    if stage_current(out, "ingest", key):
        print("ingest: up to date")
        return EXIT_OK
    with open(inter, encoding="utf-8") as fi, open(meta, encoding="utf-8") as fm:
        catalog = ingest(fi, fm, provenance=ds.get("name", inter.stem), max_error_rate=ds.get("max_error_rate", 0.01))
    filtered = kcore_filter(catalog, k)
    sequences = build_sequences(filtered, max_len)
    save_catalog(filtered, out / "catalog")
    jsonl.write_jsonl(out / "sequences.jsonl", sequences_to_rows(sequences), {"kind": "sequences", "max_len": max_len})
    report = {
        **catalog.report.as_dict(),
        "k": k,
        "items_before": len(catalog.items),
        "items_after": len(filtered.items),
        "users_after": len(filtered.users),
        "interactions_after": len(filtered.interactions),
        "mean_sequence_length": sum(len(s) for s in sequences) / len(sequences),
    }
    _write_json(out / "ingest_report.json", report)
    outputs = [out / "catalog" / "items.jsonl", out / "catalog" / "interactions.jsonl",
               out / "sequences.jsonl", out / "ingest_report.json"]
    mark_stage(out, "ingest", key, outputs)
    print(f"ingest: {report['users_after']} users, {report['items_after']} items, "
          f"{report['interactions_after']} interactions after {k}-core")
    return EXIT_OK


def cmd_split(cfg: RunConfig, args) -> int:
    out = cfg.output_dir
    sp = cfg.section("split")
    kind = sp.get("kind", "LeaveOneOut")
    seq_path = _require(out / "sequences.jsonl", "ingest")
    key = jsonl.digest("split", sp, jsonl.file_digest(seq_path))
    if stage_current(out, "split", key):
        print("split: up to date")
        return EXIT_OK
    sequences = _load_sequences(out)
    outputs = []
    if kind in ("LeaveOneOut", "both"):
        loo = leave_one_out_split(sequences)
        path = out / "split_loo.jsonl"
        jsonl.write_jsonl(path, split_to_rows(loo), {"kind": "split", "split_kind": "LeaveOneOut",
                                                     "excluded": list(loo.excluded)})
        outputs.append(path)
        print(f"split: leave-one-out train={len(loo.train)} validation={len(loo.validation)} test={len(loo.test)}")
    if kind in ("ProductSearch801010", "both"):
        catalog = load_catalog(out / "catalog")
        pairs = sorted({
            (e.item_id, ", ".join(catalog.items[e.item_id].categories))
            for s in sequences for e in s.events if catalog.items[e.item_id].categories
        })
        ps = product_search_split(pairs, sp["seed"])
        path = out / "split_product_search.jsonl"
        jsonl.write_jsonl(path, split_to_rows(ps), {"kind": "split", "split_kind": "ProductSearch801010",
                                                    "seed": sp["seed"]})
        outputs.append(path)
        print(f"split: product search train={len(ps.train)} validation={len(ps.validation)} test={len(ps.test)}")
    mark_stage(out, "split", key, outputs)
    return EXIT_OK


def _corpus_inputs(cfg: RunConfig):
    out = cfg.output_dir
    catalog = load_catalog(_require(out / "catalog", "ingest"))
    return catalog, _load_loo(out)


def cmd_annotate(cfg: RunConfig, args) -> int:
    catalog, split = _corpus_inputs(cfg)
    gen = _generation_config(cfg)
    teacher = _teacher(cfg)
    client = _client(cfg, teacher=teacher)
    plan = plan_corpus(catalog, split, gen)
    fetched = prefetch(plan, catalog, client, gen)
    report = {
        "upstream_calls": client.upstream_calls,
        # the backend's own counter, independent of the client's bookkeeping
        "teacher_calls": getattr(teacher, "calls", None),
        "cache_hits": client.cache_hits,
        "resolved": len(fetched.texts),
        "failed": len(fetched.errors),
        "budget_cut": fetched.budget_cut,
    }
    _write_json(cfg.output_dir / "annotate_report.json", report)
    record = cfg.section("teacher").get("record_fixture")
    if record:
        recorded = {}
        for attempt in plan:
            for req in requests_for(attempt.template, attempt.instance, catalog, client, gen.intention_kind).values():
                if req.digest in fetched.texts:
                    recorded[req.digest] = (req, fetched.texts[req.digest])
        save_fixture(cfg.path(record), recorded)
        print(f"annotate: recorded {len(recorded)} responses to {cfg.path(record)}")
    print(f"annotate: upstream_calls={report['upstream_calls']} cache_hits={report['cache_hits']} "
          f"resolved={report['resolved']} failed={report['failed']}")
    return EXIT_PARTIAL if fetched.budget_cut else EXIT_OK


def cmd_corpus(cfg: RunConfig, args) -> int:
    out = cfg.output_dir
    catalog, split = _corpus_inputs(cfg)
    gen = _generation_config(cfg)
    client = _client(cfg)
    plan = plan_corpus(catalog, split, gen)
    result = assemble(plan, catalog, client, gen, prefetch(plan, catalog, client, gen))
    path = out / "corpus.jsonl"
    result.write(path)
    print(format_stats(result.stats))
    if result.partial:
        print("corpus: PARTIAL, upstream call budget exhausted", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_audit(cfg: RunConfig, args) -> int:
    if args.aggregate:
        result = audit_mod.aggregate(audit_mod.read_sheet(args.aggregate))
        print(audit_mod.format_aggregate(result))
        return EXIT_OK
    out = cfg.output_dir
    _, rows = jsonl.read_jsonl(_require(out / "corpus.jsonl", "corpus"))
    au = cfg.section("audit")
    catalog = load_catalog(out / "catalog")
    sheet = audit_mod.audit_sample(rows, au.get("n_per_kind", 100), au.get("seed", 0), catalog)
    path = out / "audit_sheet.csv"
    audit_mod.write_sheet(sheet, path)
    counts = {k: sum(r["kind"] == k for r in sheet) for k in audit_mod.KINDS}
    print(f"audit: wrote {len(sheet)} rows to {path} ({counts['preference']} preference, "
          f"{counts['intention']} intention)")
    return EXIT_OK


def _parse_scenario(text: str) -> EvalScenario:
    if "=" in text:
        sid, aspects = text.split("=", 1)
    else:
        sid, aspects = text.replace(",", "_"), text
    try:
        return EvalScenario.parse(sid, aspects)
    except (ValueError, KeyError) as exc:
        raise ConfigError([f"--scenario: cannot parse {text!r} ({exc})"]) from None


def _eval_scenarios(cfg: RunConfig, args) -> list[tuple[EvalScenario, str | None]]:
    if args.scenario:
        return [(_parse_scenario(s), None) for s in args.scenario]
    ev = cfg.section("eval")
    rows = ev.get("scenarios") or [s.as_dict() for s in default_scenarios()]
    return [(EvalScenario.parse(s["scenario_id"], s["aspects"]), s.get("template_id")) for s in rows]


def _pool_spec(cfg: RunConfig, args, kind: str, split) -> PoolSpec:
    pool = cfg.section("eval").get("pool", {})
    pk = PoolKind(kind)
    n = pool.get("n_negatives", 99 if pk is PoolKind.LargeUniform else 9)
    index = None
    if pk is PoolKind.HardRetrieved:
        path = cfg.output_dir / "retriever_index.jsonl"
        window = pool.get("window", 5)
        key = jsonl.digest("index", window, jsonl.file_digest(cfg.output_dir / "split_loo.jsonl"))
        if stage_current(cfg.output_dir, "index", key):
            index = RetrieverIndex.load(path)
        else:
            index = build_retriever_index(split.train_sequences(), load_catalog(cfg.output_dir / "catalog"), window)
            index.save(path)
            mark_stage(cfg.output_dir, "index", key, [path])
    return PoolSpec(pk, n, pool.get("alpha", 0.5), index)


def cmd_eval(cfg: RunConfig, args) -> int:
    out = cfg.output_dir
    ev = cfg.section("eval")
    seed = ev.get("seed", 0)
    catalog, split = _corpus_inputs(cfg)
    part = ev.get("part", "test")
    instances = split.held_out(part)
    sc = dict(cfg.section("scorer"))
    if args.scorer:
        sc["backend"] = args.scorer
        problems: list[str] = []
        _scorer_problems(problems, sc, cfg, "--scorer")
        if problems:
            raise ConfigError(problems)
    scorer = build_scorer(sc, cfg)
    recorder = RecordingScorer(scorer) if args.record_fixture else None
    active: Scorer = recorder or scorer
    # teacher slots come from the cache; only the offline fallback may fill gaps
    te_backend = cfg.section("teacher").get("backend", "deterministic")
    slots = _client(cfg, offline=te_backend != "deterministic")
    pool_kind = args.pool or ev.get("pool", {}).get("kind", "UniformRandom")
    common = dict(slots=slots, per_token=bool(sc.get("per_token", False)),
                  skip_threshold=ev.get("skip_threshold", 0.05),
                  intention_kind=ev.get("intention_kind", "vague_intention"))
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    manifests = []
    invalid = False
    for scenario, template_id in _eval_scenarios(cfg, args):
        if template_id is None and ev.get("select_on_validation"):
            ids = [t.template_id for t in evaluable_templates(scenario.aspects)]
            template_id = template_selection_on_validation(
                scenario, ids, active, split.held_out("validation"), catalog, seed=seed, **common
            )
        if args.grouped or ev.get("grouped"):
            result = grouped_evaluation(instances, catalog, scenario, active, seed=seed,
                                        template_id=template_id, **common)
            tag = "grouped"
        else:
            pool = _pool_spec(cfg, args, pool_kind, split)
            result = evaluate_scenario(instances, catalog, scenario, active, pool=pool, seed=seed,
                                       template_id=template_id, **common)
            tag = pool.kind.value
        manifest = result.manifest
        path = eval_dir / f"{scenario.scenario_id}__{tag}.manifest.json"
        write_manifest(manifest, path)
        manifests.append(manifest)
        invalid |= not result.valid
        m = manifest["metrics"]
        print(f"eval {scenario.scenario_id} [{manifest['template_id']}, {tag}, {manifest['scorer']}]: "
              + " ".join(f"{k}={m[k]:.4f}" for k in m)
              + f" n={manifest['n']} skipped={manifest['skipped']}"
              + ("" if result.valid else " INVALID"))
    curve_rows = None
    if ev.get("curve") and not args.scenario:
        curve = ev["curve"]
        held = curve.get("heldout") or {"scenario_id": "heldout", "aspects": "P0,I1,T2"}
        scenario = EvalScenario.parse(held["scenario_id"], held["aspects"])
        fixtures = curve.get("fixtures", {})

        def factory(subset_id: str) -> Scorer:
            return FixtureScorer.load(cfg.path(fixtures[subset_id]))

        points = heldout_scenario_run(curve["subsets"], scenario, factory, instances, catalog, seed=seed,
                                      template_id=held.get("template_id"), **common)
        write_curve(points, eval_dir / "curve.jsonl")
        curve_rows = read_curve(eval_dir / "curve.jsonl")
        print(f"eval: curve with {sum(p.report is not None for p in points)}/{len(points)} points "
              f"-> {eval_dir / 'curve.jsonl'}")
    if args.plot and manifests:
        from .plotting import plot_curve, plot_metrics

        figure = plot_metrics(manifests, eval_dir / "metrics.svg", title=f"scorer: {manifests[0]['scorer']}")
        print(f"eval: figure {figure}")
        if curve_rows is not None:
            print(f"eval: figure {plot_curve(curve_rows, eval_dir / 'curve.svg')}")
    if recorder is not None:
        recorder.save(cfg.path(args.record_fixture))
        print(f"eval: recorded {len(recorder.recorded)} score requests to {cfg.path(args.record_fixture)}")
    return EXIT_INVALID if invalid else EXIT_OK


def cmd_serve_fixture(cfg: RunConfig | None, args) -> int:
    from .server import make_server

    fixture = args.fixture
    if fixture is None:
        if cfg is None or cfg.section("scorer").get("fixture") is None:
            raise ConfigError(["--fixture: required when the config has no scorer.fixture"])
        fixture = cfg.path(cfg.section("scorer")["fixture"])
    scorer = FixtureScorer.load(fixture)
    server = make_server(scorer, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"serving {scorer.identity} on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


COMMANDS: dict[str, Callable] = {
    "ingest": cmd_ingest,
    "split": cmd_split,
    "annotate": cmd_annotate,
    "corpus": cmd_corpus,
    "audit": cmd_audit,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recinstruct", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=True, help="run configuration (JSON)")
        return p

    with_config("ingest", "parse, k-core filter and sequence the raw dataset")
    with_config("split", "write leave-one-out and/or product-search splits")
    with_config("annotate", "fill the annotation cache with teacher slots")
    with_config("corpus", "generate the instruction corpus and print its statistics")
    p = sub.add_parser("audit", help="write an audit sheet or aggregate an answered one")
    p.add_argument("--config")
    p.add_argument("--aggregate", metavar="SHEET", help="answered audit sheet (CSV) to aggregate")
    p = with_config("eval", "evaluate scenarios and write manifests")
    p.add_argument("--scenario", action="append", metavar="ID=P,I,T", help="scenario to evaluate (repeatable)")
    p.add_argument("--pool", choices=[k.value for k in PoolKind])
    p.add_argument("--scorer", choices=SCORER_BACKENDS)
    p.add_argument("--grouped", action="store_true", help="grouped reranking over 100 candidates")
    p.add_argument("--plot", action="store_true", help="render SVG figures next to the manifests")
    p.add_argument("--record-fixture", metavar="PATH", help="save every score request/response as a fixture")
    p = sub.add_parser("serve-fixture", help="serve a scorer fixture over the /v1/score protocol")
    p.add_argument("--config")
    p.add_argument("--fixture", help="fixture file (defaults to scorer.fixture in the config)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8800)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "serve-fixture":
            return cmd_serve_fixture(load_config(args.config) if args.config else None, args)
        if args.command == "audit" and args.aggregate:
            return cmd_audit(None, args)
        if args.command == "audit" and not args.config:
            parser.error("audit needs --config or --aggregate")
        cfg = load_config(args.config)
        with OutputLock(cfg.output_dir):
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except Locked as exc:
        print(f"locked: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except (CatalogError, TemplateError, EvaluationError, ScorerError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
