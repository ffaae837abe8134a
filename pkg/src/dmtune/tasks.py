"""Task specifications: a line-oriented file format, slot instantiation, the
leave-one-out split, and the balanced-tuple builder for record tasks.

Grammar reference lives in docs/task-format.md. Specs are frozen dataclasses;
everything is validated at load time so downstream code can trust a suite.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from string import Template
from typing import Iterable, Sequence

from .model import encode, is_encodable
from .numerics import Rng
from .objective import DistributionError, TargetDistribution

__all__ = [
    "SchemaError", "DomainError", "TaskSpec", "Use", "SuiteConfig",
    "load_suite", "loads_suite", "serialize_suite", "save_suite",
    "instantiate", "leave_one_out", "record_task", "balanced_tuples",
    "DEFAULT_N_EVAL",
]

FORMAT_VERSION = 1
DEFAULT_N_EVAL = 1000
_SLOT_RE = re.compile(r"\$(\w+)")

KINDS = ("enumerated", "file", "range", "open", "tuples")


class SchemaError(ValueError):
    """Task file violates the schema; message carries file:line context."""


class DomainError(ValueError):
    """Slot binding outside its declared domain, or an inverted range."""


@dataclass(frozen=True)
class TaskSpec:
    """One task: prompt templates plus a target description.

    kind selects the target source: enumerated weights, a counts file
    (empirical proxy), an integer range over two slots, open (no ground
    truth), or generated record tuples.
    """

    name: str
    prompts: tuple[str, ...]
    kind: str
    entries: tuple[tuple[str, float], ...] = ()
    sample_file: str = ""
    sample_counts: tuple[tuple[str, float], ...] = ()
    range_slots: tuple[str, ...] = ()
    slots: tuple[tuple[str, tuple[int, int]], ...] = ()
    fields: tuple[tuple[str, tuple[str, ...]], ...] = ()
    tuple_budget: int = 0
    parser_fields: int | None = None
    fold_case: bool = False
    n_eval: int = DEFAULT_N_EVAL

    @property
    def has_ground_truth(self) -> bool:
        return self.kind != "open"

    def slot_domain(self, name: str) -> tuple[int, int]:
        for n, dom in self.slots:
            if n == name:
                return dom
        raise DomainError(f"task {self.name!r} declares no slot {name!r}")

    def field_names(self) -> list[str]:
        return [n for n, _ in self.fields]


@dataclass(frozen=True)
class Use:
    """Suite-level instantiation directive: which prompt/bindings feed which split."""

    task: str
    role: str                                   # train | eval | both
    prompt: int | None = None                   # 1-based template index, None = all
    bindings: tuple[tuple[str, int], ...] = ()


@dataclass(frozen=True)
class SuiteConfig:
    """An ordered set of validated tasks plus optional use directives."""

    tasks: tuple[TaskSpec, ...]
    uses: tuple[Use, ...] = ()

    def names(self) -> list[str]:
        return [t.name for t in self.tasks]

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise SchemaError(f"suite has no task named {name!r}")

    def uses_for(self, role: str) -> list[Use]:
        # "both" spans the train and eval splits; pretrain is its own role
        want = {role, "both"} if role in ("train", "eval") else {role}
        return [u for u in self.uses if u.role in want]


# ---- Parsing ----

def _parse_weight(token: str, where: str) -> float:
    try:
        return float(Fraction(token))
    except (ValueError, ZeroDivisionError) as exc:
        raise SchemaError(f"{where}: bad weight {token!r}") from exc


def _parse_domain(token: str, where: str) -> tuple[int, int]:
    m = re.fullmatch(r"(-?\d+)\.\.(-?\d+)", token)
    if not m:
        raise SchemaError(f"{where}: slot domain must look like 1..900, got {token!r}")
    lo, hi = int(m.group(1)), int(m.group(2))
    if hi < lo:
        raise SchemaError(f"{where}: empty slot domain {token}")
    return lo, hi


class _TaskBuilder:
    def __init__(self, name: str, line: int):
        self.name = name
        self.line = line
        self.prompts: list[str] = []
        self.kind: str | None = None
        self.entries: list[tuple[str, float]] = []
        self.sample_file = ""
        self.range_slots: tuple[str, ...] = ()
        self.slots: list[tuple[str, tuple[int, int]]] = []
        self.fields: list[tuple[str, tuple[str, ...]]] = []
        self.tuple_budget = 0
        self.parser_fields: int | None = None
        self.fold_case = False
        self.n_eval = DEFAULT_N_EVAL

    def set_kind(self, kind: str, where: str) -> None:
        if self.kind is not None and self.kind != kind:
            raise SchemaError(f"{where}: task {self.name!r} mixes target kinds "
                              f"({self.kind} and {kind})")
        self.kind = kind


def loads_suite(text: str, *, source: str = "<string>",
                base_dir: Path | None = None) -> SuiteConfig:
    """Parse suite text; file references resolve against base_dir."""
    lines = text.splitlines()
    where = lambda i: f"{source}:{i + 1}"
    tasks: list[TaskSpec] = []
    uses: list[Use] = []
    seen: set[str] = set()
    cur: _TaskBuilder | None = None
    header_ok = False

    for i, raw in enumerate(lines):
        line = raw.rstrip("\n")
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if not header_ok:
            m = re.fullmatch(r"taskfile\s+(\d+)", stripped)
            if not m:
                raise SchemaError(f"{where(i)}: expected 'taskfile {FORMAT_VERSION}' header")
            if int(m.group(1)) != FORMAT_VERSION:
                raise SchemaError(f"{where(i)}: unsupported format version {m.group(1)}")
            header_ok = True
            continue

        if cur is None:
            parts = stripped.split()
            if parts[0] != "task" or len(parts) != 2:
                raise SchemaError(f"{where(i)}: expected 'task <name>', got {stripped!r}")
            name = parts[1]
            if name in seen:
                raise SchemaError(f"{where(i)}: duplicate task name {name!r}")
            seen.add(name)
            cur = _TaskBuilder(name, i + 1)
            continue

        if stripped == "end":
            tasks.append(_finish_task(cur, source, base_dir))
            cur = None
            continue
        _task_directive(cur, line, stripped, where(i), uses)

    if cur is not None:
        raise SchemaError(f"{source}:{cur.line}: task {cur.name!r} is missing 'end'")
    if not header_ok:
        raise SchemaError(f"{source}:1: empty file, expected 'taskfile {FORMAT_VERSION}' header")
    suite = SuiteConfig(tuple(tasks), tuple(uses))
    for u in uses:
        _check_use(suite, u, source)
    return suite


def _task_directive(cur: _TaskBuilder, line: str, stripped: str, where: str,
                    uses: list[Use]) -> None:
    key, _, rest = stripped.partition(" ")
    if key == "prompt":
        # take the raw text after 'prompt ' so trailing spaces survive
        body = line[line.index("prompt") + len("prompt "):]
        if not body:
            raise SchemaError(f"{where}: empty prompt")
        cur.prompts.append(body)
    elif key == "parser":
        toks = rest.split()
        if toks[:1] == ["single"] and len(toks) == 1:
            cur.parser_fields = None
        elif toks[:1] == ["multi"] and len(toks) == 2 and toks[1].isdigit() and int(toks[1]) >= 2:
            cur.parser_fields = int(toks[1])
        else:
            raise SchemaError(f"{where}: parser must be 'single' or 'multi <k>=2..'")
    elif key == "fold-case":
        if rest not in ("on", "off"):
            raise SchemaError(f"{where}: fold-case must be on or off")
        cur.fold_case = rest == "on"
    elif key == "samples":
        if not rest.isdigit() or int(rest) < 1:
            raise SchemaError(f"{where}: samples needs a positive integer")
        cur.n_eval = int(rest)
    elif key == "slot":
        toks = rest.split()
        if len(toks) != 2:
            raise SchemaError(f"{where}: slot needs '<name> <lo>..<hi>'")
        if any(n == toks[0] for n, _ in cur.slots):
            raise SchemaError(f"{where}: duplicate slot {toks[0]!r}")
        cur.slots.append((toks[0], _parse_domain(toks[1], where)))
    elif key == "target":
        w_tok, _, text = rest.partition(" ")
        if not text:
            raise SchemaError(f"{where}: target needs '<weight> <text>'")
        cur.set_kind("enumerated", where)
        cur.entries.append((text, _parse_weight(w_tok, where)))
    elif key == "target-file":
        if not rest:
            raise SchemaError(f"{where}: target-file needs a path")
        cur.set_kind("file", where)
        cur.sample_file = rest.strip()
    elif key == "target-range":
        toks = rest.split()
        if len(toks) != 2 or not all(t.startswith("$") for t in toks):
            raise SchemaError(f"{where}: target-range needs two $slot references")
        cur.set_kind("range", where)
        cur.range_slots = (toks[0][1:], toks[1][1:])
    elif key == "target-open":
        cur.set_kind("open", where)
    elif key == "target-tuples":
        if not rest.isdigit() or int(rest) < 1:
            raise SchemaError(f"{where}: target-tuples needs a positive budget")
        cur.set_kind("tuples", where)
        cur.tuple_budget = int(rest)
    elif key == "field":
        toks = rest.split()
        if len(toks) < 2:
            raise SchemaError(f"{where}: field {toks[0] if toks else ''!r} has zero values")
        if any(n == toks[0] for n, _ in cur.fields):
            raise SchemaError(f"{where}: duplicate field {toks[0]!r}")
        cur.fields.append((toks[0], tuple(toks[1:])))
    elif key == "use":
        toks = rest.split()
        if not toks or toks[0] not in ("train", "eval", "both", "pretrain"):
            raise SchemaError(f"{where}: use needs a role (train|eval|both|pretrain)")
        prompt: int | None = None
        bindings: list[tuple[str, int]] = []
        for tok in toks[1:]:
            k, eq, v = tok.partition("=")
            if not eq or not re.fullmatch(r"-?\d+", v):
                raise SchemaError(f"{where}: use bindings look like name=int, got {tok!r}")
            if k == "prompt":
                prompt = int(v)
            else:
                bindings.append((k, int(v)))
        uses.append(Use(cur.name, toks[0], prompt, tuple(bindings)))
    else:
        raise SchemaError(f"{where}: unknown directive {key!r}")


def _load_counts(path: Path, source: str) -> tuple[tuple[str, float], ...]:
    if not path.exists():
        raise SchemaError(f"{source}: sample file {path} does not exist")
    rows: list[tuple[str, float]] = []
    for j, raw in enumerate(path.read_text().splitlines()):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        try:
            value, count = s.rsplit(None, 1)
            c = float(count)
        except ValueError as exc:
            raise SchemaError(f"{path}:{j + 1}: expected '<value> <count>'") from exc
        if c <= 0:
            raise SchemaError(f"{path}:{j + 1}: count must be positive")
        rows.append((value, c))
    if not rows:
        raise SchemaError(f"{source}: sample file {path} has no rows")
    return tuple(rows)


def _finish_task(b: _TaskBuilder, source: str, base_dir: Path | None) -> TaskSpec:
    where = f"{source}:{b.line}"
    if not b.prompts:
        raise SchemaError(f"{where}: task {b.name!r} has no prompt")
    if b.kind is None:
        raise SchemaError(f"{where}: task {b.name!r} declares no target")
    declared = {n for n, _ in b.slots}
    referenced = {m for p in b.prompts for m in _SLOT_RE.findall(p)}
    if referenced - declared:
        raise SchemaError(f"{where}: task {b.name!r} references undeclared "
                          f"slot(s) {sorted(referenced - declared)}")
    for p in b.prompts:
        if not is_encodable(_SLOT_RE.sub("0", p)):
            raise SchemaError(f"{where}: task {b.name!r} prompt is not printable ASCII")

    counts: tuple[tuple[str, float], ...] = ()
    if b.kind == "enumerated":
        try:
            TargetDistribution(list(b.entries))
        except DistributionError as exc:
            raise SchemaError(f"{where}: task {b.name!r}: {exc}") from exc
    elif b.kind == "file":
        root = base_dir if base_dir is not None else Path(".")
        counts = _load_counts(root / b.sample_file, where)
        try:
            # validate the emitted (brace-wrapped) form, same as task_target builds
            TargetDistribution.from_counts([("{%s}" % v, c) for v, c in counts])
        except DistributionError as exc:
            raise SchemaError(f"{where}: task {b.name!r}: {exc}") from exc
    elif b.kind == "range":
        for slot in b.range_slots:
            if slot not in declared:
                raise SchemaError(f"{where}: task {b.name!r} target-range uses "
                                  f"undeclared slot {slot!r}")
    elif b.kind == "tuples":
        if not b.fields:
            raise SchemaError(f"{where}: task {b.name!r} needs field lines for target-tuples")
        capacity = 1
        for _, values in b.fields:
            capacity *= len(values)
        if b.tuple_budget > capacity:
            raise SchemaError(f"{where}: task {b.name!r} budget {b.tuple_budget} exceeds "
                              f"{capacity} distinct tuples")
        if b.parser_fields is None:
            b.parser_fields = len(b.fields)
        elif b.parser_fields != len(b.fields):
            raise SchemaError(f"{where}: task {b.name!r} parser multi {b.parser_fields} "
                              f"does not match {len(b.fields)} fields")
    for text, _ in b.entries:
        if not is_encodable(text):
            raise SchemaError(f"{where}: task {b.name!r} target {text!r} is not printable ASCII")

    return TaskSpec(
        name=b.name, prompts=tuple(b.prompts), kind=b.kind,
        entries=tuple(b.entries), sample_file=b.sample_file, sample_counts=counts,
        range_slots=b.range_slots, slots=tuple(b.slots), fields=tuple(b.fields),
        tuple_budget=b.tuple_budget, parser_fields=b.parser_fields,
        fold_case=b.fold_case, n_eval=b.n_eval,
    )


def _check_use(suite: SuiteConfig, u: Use, source: str) -> None:
    spec = suite.task(u.task)
    if u.prompt is not None and not 1 <= u.prompt <= len(spec.prompts):
        raise SchemaError(f"{source}: use for task {u.task!r} names prompt {u.prompt}, "
                          f"but the task has {len(spec.prompts)} prompt(s)")
    declared = {n for n, _ in spec.slots}
    for k, v in u.bindings:
        if k not in declared:
            raise SchemaError(f"{source}: use for task {u.task!r} binds unknown slot {k!r}")
        lo, hi = spec.slot_domain(k)
        if not lo <= v <= hi:
            raise SchemaError(f"{source}: use for task {u.task!r} binds {k}={v} "
                              f"outside {lo}..{hi}")


def load_suite(path) -> SuiteConfig:
    """Load and fully validate a task suite file."""
    p = Path(path)
    return loads_suite(p.read_text(), source=str(p), base_dir=p.parent)


# ---- Serialization ----

def _format_weight(w: float) -> str:
    f = Fraction(w).limit_denominator(10**9)
    return str(f) if float(f) == w and f.denominator > 1 else repr(w)


def serialize_suite(suite: SuiteConfig) -> str:
    """Render a suite back to schema text; load(serialize(s)) == s."""
    out = [f"taskfile {FORMAT_VERSION}", ""]
    for t in suite.tasks:
        out.append(f"task {t.name}")
        for p in t.prompts:
            out.append(f"  prompt {p}")
        for n, (lo, hi) in t.slots:
            out.append(f"  slot {n} {lo}..{hi}")
        if t.parser_fields is not None and t.kind != "tuples":
            out.append(f"  parser multi {t.parser_fields}")
        if t.fold_case:
            out.append("  fold-case on")
        if t.n_eval != DEFAULT_N_EVAL:
            out.append(f"  samples {t.n_eval}")
        if t.kind == "enumerated":
            for text, w in t.entries:
                out.append(f"  target {_format_weight(w)} {text}")
        elif t.kind == "file":
            out.append(f"  target-file {t.sample_file}")
        elif t.kind == "range":
            out.append(f"  target-range ${t.range_slots[0]} ${t.range_slots[1]}")
        elif t.kind == "open":
            out.append("  target-open")
        elif t.kind == "tuples":
            for n, values in t.fields:
                out.append(f"  field {n} {' '.join(values)}")
            out.append(f"  target-tuples {t.tuple_budget}")
        for u in suite.uses:
            if u.task == t.name:
                toks = [f"  use {u.role}"]
                if u.prompt is not None:
                    toks.append(f"prompt={u.prompt}")
                toks.extend(f"{k}={v}" for k, v in u.bindings)
                out.append(" ".join(toks))
        out.append("end")
        out.append("")
    return "\n".join(out)


def save_suite(path, suite: SuiteConfig) -> None:
    Path(path).write_text(serialize_suite(suite))


# ---- Instantiation ----

def _build_range_target(spec: TaskSpec, low: int, high: int) -> TargetDistribution:
    if high < low:
        raise DomainError(f"task {spec.name!r}: range high {high} < low {low}")
    return TargetDistribution.uniform(["{%d}" % v for v in range(low, high + 1)])


def render_record(values: Sequence[str]) -> str:
    return " ".join("{%s}" % v for v in values)


def task_target(spec: TaskSpec, bindings: dict[str, int] | None = None
                ) -> TargetDistribution | None:
    """The task's target distribution (None for open tasks); range tasks need
    their two slots bound."""
    if spec.kind == "enumerated":
        return TargetDistribution(list(spec.entries))
    if spec.kind == "file":
        # file rows hold raw values; the emitted form is brace-wrapped
        return TargetDistribution.from_counts(
            [("{%s}" % v, c) for v, c in spec.sample_counts])
    if spec.kind == "open":
        return None
    if spec.kind == "tuples":
        rows = balanced_tuples(spec.fields, spec.tuple_budget, spec.name)
        return TargetDistribution.uniform([render_record(r) for r in rows])
    lo_name, hi_name = spec.range_slots
    b = bindings or {}
    if lo_name not in b or hi_name not in b:
        raise DomainError(f"task {spec.name!r} needs slots {lo_name!r} and {hi_name!r} bound")
    return _build_range_target(spec, b[lo_name], b[hi_name])


def instantiate(spec: TaskSpec, bindings: dict[str, int] | None = None,
                rng: Rng | None = None) -> list[tuple[str, TargetDistribution | None]]:
    """Concrete (prompt, target) pairs, one per prompt template.

    Missing slot values are drawn from their domains (range tasks draw
    high > low); out-of-domain bindings raise DomainError.
    """
    bound = dict(bindings or {})
    for name, (lo, hi) in spec.slots:
        if name in bound:
            if not lo <= bound[name] <= hi:
                raise DomainError(f"task {spec.name!r}: {name}={bound[name]} "
                                  f"outside {lo}..{hi}")
        else:
            if rng is None:
                raise DomainError(f"task {spec.name!r}: slot {name!r} unbound and no rng given")
            lo_eff = lo
            if spec.kind == "range" and name == spec.range_slots[1]:
                lo_eff = max(lo, bound.get(spec.range_slots[0], lo) + 1)
                if lo_eff > hi:
                    raise DomainError(f"task {spec.name!r}: no room to draw {name!r} above "
                                      f"{bound.get(spec.range_slots[0])}")
            bound[name] = int(rng.integers(lo_eff, hi + 1))
    target = task_target(spec, bound)
    sub = {k: str(v) for k, v in bound.items()}
    rendered = [Template(p).substitute(sub) for p in spec.prompts]
    for r in rendered:
        encode(r)  # every instantiation must be encodable
    return [(r, target) for r in rendered]


# ---- Leave-one-out ----

def leave_one_out(suite: SuiteConfig, held_out: str | None
                  ) -> tuple[list[TaskSpec], list[TaskSpec]]:
    """Split tasks into (train, eval); empty held_out means train on everything."""
    if not held_out:
        return list(suite.tasks), []
    if held_out not in suite.names():
        raise SchemaError(f"suite has no task named {held_out!r}")
    train = [t for t in suite.tasks if t.name != held_out]
    evals = [t for t in suite.tasks if t.name == held_out]
    return train, evals


# ---- Record tasks ----

def balanced_tuples(fields: Sequence[tuple[str, Sequence[str]]], budget: int,
                    key: str) -> list[tuple[str, ...]]:
    """budget distinct value tuples with per-field marginals as even as possible.

    Each column tiles its values ceil(budget/len) times, truncates to budget and
    shuffles under a substream seeded by (key, field), so a field whose size
    divides the budget gets exactly equal counts. Duplicate rows are repaired by
    swapping one column entry between two rows, which leaves marginals intact.
    """
    if budget < 1:
        raise SchemaError("tuple budget must be positive")
    capacity = 1
    for name, values in fields:
        if not values:
            raise SchemaError(f"record field {name!r} has zero values")
        capacity *= len(values)
    if budget > capacity:
        raise SchemaError(f"budget {budget} exceeds {capacity} distinct tuples")
    base = Rng(0).substream(f"record-task/{key}")
    cols: list[list[str]] = []
    for name, values in fields:
        reps = -(-budget // len(values))
        col = (list(values) * reps)[:budget]
        order = base.substream(f"shuffle/{name}").permutation(budget)
        cols.append([col[i] for i in order])
    rows = [list(r) for r in zip(*cols)]

    repair = base.substream("repair")
    for _ in range(200 * budget):
        seen: dict[tuple[str, ...], int] = {}
        dup = -1
        for idx, r in enumerate(rows):
            k = tuple(r)
            if k in seen:
                dup = idx
                break
            seen[k] = idx
        if dup < 0:
            return [tuple(r) for r in rows]
        c = int(repair.integers(0, len(fields)))
        other = int(repair.integers(0, budget))
        rows[dup][c], rows[other][c] = rows[other][c], rows[dup][c]
    raise SchemaError(f"record task {key!r}: could not separate {budget} tuples")


def record_task(name: str, fields: Sequence[tuple[str, Sequence[str]]], budget: int,
                prompts: Sequence[str] | None = None,
                n_eval: int = DEFAULT_N_EVAL) -> TaskSpec:
    """Multi-field record task over generated tuples with balanced marginals.

    The tuple set is deterministic in the task name, so the same spec always
    trains and evaluates against the same target."""
    if prompts is None:
        k = len(fields)
        names = ", ".join(n for n, _ in fields)
        prompts = [f"Output a random record with fields {names}, each in braces: "]
    spec = TaskSpec(
        name=name, prompts=tuple(prompts), kind="tuples",
        fields=tuple((n, tuple(v)) for n, v in fields),
        tuple_budget=budget, parser_fields=len(fields), n_eval=n_eval,
    )
    balanced_tuples(spec.fields, budget, name)  # validates budget vs capacity
    return spec
