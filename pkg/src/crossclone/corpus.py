"""Multilingual program corpora: loading, validation, segmentation, snippet
windows, synthetic dialect generation, and training-batch sampling.

The on-disk format is UTF-8 JSON lines, one program per line:

    {"id": ..., "language": ..., "problem_id": ..., "code": ..., "snippets": [...]}

``snippets`` may be empty for retrieval-only corpora; programs fed to the
snippet-contrast stage must carry a non-empty segmentation. The writer emits
keys in exactly the order above so that write/read round-trips are
byte-stable.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import (
    ConfigError,
    CorpusParseError,
    SamplingError,
    SchemaError,
    ValidationError,
)

_CORPUS_FIELDS = ("id", "language", "problem_id", "code", "snippets")


@dataclass(frozen=True)
class SnippetText:
    """One segment of a program: a 0-based position and its source lines."""

    index: int
    text: str


@dataclass(frozen=True)
class Program:
    """A single solution: language-tagged source plus its snippet segmentation.

    ``problem_id`` groups semantically equivalent solutions; two programs are
    clones exactly when their problem ids match.
    """

    id: str
    language: str
    problem_id: str
    code: str
    snippets: tuple[SnippetText, ...] = ()


@dataclass(frozen=True)
class SnippetWindow:
    """Neighborhood of one center snippet: the indices within ``radius`` of it."""

    program_id: str
    center_index: int
    functional_indices: tuple[int, ...]
    radius: int


@dataclass(frozen=True)
class CloneExample:
    """A labeled query/candidate pair; label 1 iff the problem ids match."""

    query_program_id: str
    candidate_program_id: str
    label: int


def _nonblank_lines(text: str) -> list[str]:
    return [line.rstrip() for line in text.splitlines() if line.strip()]


def validate_program(program: Program) -> None:
    """Check all Program invariants; raise ValidationError on the first failure.

    Snippet text must be non-empty, indices must run 0..n-1, and the snippets
    must reconstruct the code up to trailing whitespace and blank lines.
    """
    if not program.problem_id:
        raise ValidationError(f"program {program.id!r}: empty problem_id")
    if not program.id:
        raise ValidationError("program with empty id")
    if not program.language:
        raise ValidationError(f"program {program.id!r}: empty language tag")
    for pos, snippet in enumerate(program.snippets):
        if snippet.index != pos:
            raise ValidationError(
                f"program {program.id!r}: snippet index {snippet.index} at position {pos}"
            )
        if not snippet.text.strip():
            raise ValidationError(
                f"program {program.id!r}: snippet {pos} is blank"
            )
    if program.snippets:
        joined = "\n".join(s.text for s in program.snippets)
        if _nonblank_lines(joined) != _nonblank_lines(program.code):
            raise ValidationError(
                f"program {program.id!r}: snippets do not reconstruct code"
            )


def segment(code: str, lines_per_snippet: int = 3) -> list[SnippetText]:
    """Partition the non-blank lines of ``code`` into fixed-size snippets.

    Each snippet holds at most ``lines_per_snippet`` logical (non-blank)
    lines; the last one may be shorter. Order is preserved and every
    non-blank line lands in exactly one snippet.
    """
    if lines_per_snippet < 1:
        raise ConfigError(f"lines_per_snippet must be >= 1, got {lines_per_snippet}")
    lines = _nonblank_lines(code)
    if not lines:
        raise ValidationError("cannot segment entirely blank code")
    snippets = []
    for start in range(0, len(lines), lines_per_snippet):
        chunk = lines[start : start + lines_per_snippet]
        snippets.append(SnippetText(index=len(snippets), text="\n".join(chunk)))
    return snippets


def make_windows(program: Program, radius: int) -> list[SnippetWindow]:
    """Build one window per center snippet whose neighborhood is non-empty.

    The functional set of center ``c`` is every index ``f`` with
    ``c - radius <= f <= c + radius`` and ``f != c``, clipped to the program
    bounds. Single-snippet programs yield no windows.
    """
    if radius < 1:
        raise ConfigError(f"window radius must be >= 1, got {radius}")
    n = len(program.snippets)
    windows = []
    for center in range(n):
        lo = max(0, center - radius)
        hi = min(n - 1, center + radius)
        functional = tuple(f for f in range(lo, hi + 1) if f != center)
        if functional:
            windows.append(
                SnippetWindow(
                    program_id=program.id,
                    center_index=center,
                    functional_indices=functional,
                    radius=radius,
                )
            )
    return windows


def load_corpus(path: str | Path) -> list[Program]:
    """Read a JSON-lines corpus file, validating every record.

    Raises CorpusParseError (with line number) for malformed JSON,
    SchemaError for missing/mistyped fields, and ValidationError for
    duplicate ids (naming both lines) or invariant violations.
    """
    programs: list[Program] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(f"invalid JSON ({exc.msg})", line_no) from exc
            if not isinstance(record, dict):
                raise SchemaError(f"line {line_no}: record is not a JSON object")
            for field in _CORPUS_FIELDS:
                if field not in record:
                    raise SchemaError(f"line {line_no}: missing field {field!r}")
            for field in ("id", "language", "problem_id", "code"):
                if not isinstance(record[field], str):
                    raise SchemaError(f"line {line_no}: field {field!r} must be a string")
            raw_snippets = record["snippets"]
            if not isinstance(raw_snippets, list) or not all(
                isinstance(s, str) for s in raw_snippets
            ):
                raise SchemaError(f"line {line_no}: field 'snippets' must be a list of strings")
            if record["id"] in seen:
                raise ValidationError(
                    f"duplicate program id {record['id']!r} on lines "
                    f"{seen[record['id']]} and {line_no}"
                )
            seen[record["id"]] = line_no
            program = Program(
                id=record["id"],
                language=record["language"],
                problem_id=record["problem_id"],
                code=record["code"],
                snippets=tuple(
                    SnippetText(index=i, text=s) for i, s in enumerate(raw_snippets)
                ),
            )
            try:
                validate_program(program)
            except ValidationError as exc:
                raise ValidationError(f"line {line_no}: {exc}") from exc
            programs.append(program)
    return programs


def save_corpus(programs: Iterable[Program], path: str | Path) -> None:
    """Write programs as JSON lines with the canonical key order."""
    with open(path, "w", encoding="utf-8") as fh:
        for program in programs:
            record = {
                "id": program.id,
                "language": program.language,
                "problem_id": program.problem_id,
                "code": program.code,
                "snippets": [s.text for s in program.snippets],
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Synthetic dialect corpus
#
# Each problem is a small abstract token program. Rendering into a dialect
# applies a seeded bijective renaming of the keyword/identifier vocabulary
# (every renamed surface form carries the dialect prefix, so renamed token
# classes are disjoint across dialects) plus a dialect-specific statement
# terminator. Numeric literals and operators are shared classes: per-problem
# constants are the cross-dialect anchor that makes the corpus learnable.
# ---------------------------------------------------------------------------

_SYLLABLES = (
    "ba", "de", "fi", "go", "hu", "ja", "ki", "lo", "mu",
    "na", "po", "qu", "ra", "su", "ta", "vo", "wi", "ze",
)
_N_KEYWORDS = 8
_N_IDENTS = 20
_SHARED_LITERALS = ("0", "1", "2", "3")
_CONSTANTS_PER_PROBLEM = 3
_CONSTANT_POOL_FRACTION = 3.0


def _constant_pool_size(n_problems: int) -> int:
    return max(12, round(_CONSTANT_POOL_FRACTION * n_problems))


def _dialect_lexicon(dialect: str, seed: int) -> dict:
    rng = random.Random(f"{seed}:lexicon:{dialect}")
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < _N_KEYWORDS + _N_IDENTS + 1:
        word = "".join(rng.choice(_SYLLABLES) for _ in range(3))
        if word in seen:
            continue
        seen.add(word)
        words.append(f"{dialect}_{word}")
    return {
        "kw": words[:_N_KEYWORDS],
        "id": words[_N_KEYWORDS : _N_KEYWORDS + _N_IDENTS],
        "term": words[-1],
    }


def _statement(template: int, ident_a: int, ident_b: int, keyword: int, literal: str, extra: str):
    # Skeletons are operator/literal-heavy so most tokens are shared across
    # dialects; each line carries only 1-2 renamed slots plus the terminator.
    if template == 0:
        line = [("id", ident_a), ("op", "="), ("lit", literal), ("op", "+"), ("lit", extra)]
    elif template == 1:
        line = [
            ("id", ident_a), ("op", "="), ("op", "("), ("lit", literal),
            ("op", "+"), ("lit", extra), ("op", ")"), ("op", "*"), ("lit", extra),
        ]
    elif template == 2:
        line = [
            ("kw", keyword), ("op", "("), ("id", ident_a), ("op", ","),
            ("lit", literal), ("op", ","), ("lit", extra), ("op", ")"),
        ]
    else:
        line = [
            ("id", ident_a), ("op", "="), ("id", ident_b), ("op", "*"),
            ("lit", literal), ("op", "-"), ("lit", extra),
        ]
    line.append(("term",))
    return line


def _abstract_program(
    problem_idx: int, variant_idx: int, constants: Sequence[int], seed: int
) -> list[list[tuple]]:
    """Token template for one solution variant, independent of dialect.

    Problem identity lives in the shared constants (every variant repeats
    them) plus per-problem identifier slots; filler lines add shared-literal
    noise.
    """
    prng = random.Random(f"{seed}:problem:{problem_idx}")
    vrng = random.Random(f"{seed}:problem:{problem_idx}:variant:{variant_idx}")
    idents = prng.sample(range(_N_IDENTS), 4)
    keywords = prng.sample(range(_N_KEYWORDS), 2)

    lines: list[list[tuple]] = []
    literals = [str(c) for c in constants]
    # Two passes over the constants so each appears at least twice.
    for literal in literals + literals:
        lines.append(
            _statement(
                vrng.randrange(4),
                vrng.choice(idents),
                vrng.choice(idents),
                vrng.choice(keywords),
                literal,
                vrng.choice(_SHARED_LITERALS),
            )
        )
    for _ in range(vrng.randint(2, 4)):
        lines.append(
            _statement(
                vrng.randrange(4),
                vrng.choice(idents),
                vrng.choice(idents),
                vrng.choice(keywords),
                vrng.choice(_SHARED_LITERALS),
                vrng.choice(_SHARED_LITERALS),
            )
        )
    vrng.shuffle(lines)
    return lines


def _render(lines: list[list[tuple]], lexicon: dict) -> str:
    rendered = []
    for line in lines:
        tokens = []
        for item in line:
            kind = item[0]
            if kind == "kw":
                tokens.append(lexicon["kw"][item[1]])
            elif kind == "id":
                tokens.append(lexicon["id"][item[1]])
            elif kind in ("lit", "op"):
                tokens.append(item[1])
            else:
                tokens.append(lexicon["term"])
        rendered.append(" ".join(tokens))
    return "\n".join(rendered)


def gen_synthetic(
    n_problems: int,
    dialects: Sequence[str],
    seed: int,
    variants_per_dialect: int = 1,
    lines_per_snippet: int = 3,
) -> list[Program]:
    """Generate a deterministic multi-dialect corpus of clone groups.

    Every problem gets ``variants_per_dialect`` solution variants, each
    rendered once per dialect; renderings of the same variant share problem
    id, snippet counts, and per-snippet token counts. Renamed token classes
    (keywords, identifiers, terminators) are lexically disjoint across
    dialects; numeric literals and operators are shared.
    """
    if n_problems < 1:
        raise ConfigError(f"n_problems must be >= 1, got {n_problems}")
    if len(dialects) < 2:
        raise ConfigError("at least 2 dialects are required")
    if len(set(dialects)) != len(dialects):
        raise ConfigError("dialect tags must be unique")
    if variants_per_dialect < 1:
        raise ConfigError("variants_per_dialect must be >= 1")

    lexicons = {d: _dialect_lexicon(d, seed) for d in dialects}
    # Constants are the cross-dialect anchor. The pool is a few times the
    # problem count, so signatures are nearly unique while the occasional
    # shared value keeps them from being a pure lookup key.
    pool = list(range(101, 101 + _constant_pool_size(n_problems)))

    programs: list[Program] = []
    for p in range(n_problems):
        problem_id = f"q{p:04d}"
        constants = random.Random(f"{seed}:constants:{p}").sample(
            pool, _CONSTANTS_PER_PROBLEM
        )
        for v in range(variants_per_dialect):
            abstract = _abstract_program(p, v, constants, seed)
            for dialect in dialects:
                code = _render(abstract, lexicons[dialect])
                programs.append(
                    Program(
                        id=f"{problem_id}-{dialect}-s{v}",
                        language=dialect,
                        problem_id=problem_id,
                        code=code,
                        snippets=tuple(segment(code, lines_per_snippet)),
                    )
                )
    return programs


def sample_clone_batch(
    programs: Sequence[Program],
    batch_size: int,
    source_lang: str,
    target_lang: str,
    rng: random.Random,
    ratio: tuple[int, int] = (1, 2),
    n_pairs: int | None = None,
):
    """Draw one fine-tuning batch: monolingual clone pairs plus a domain batch.

    Returns ``(clone_examples, domain_batch)`` where clone_examples are
    positive source-language pairs drawn from distinct problems (so in-batch
    negatives never collide with a clone), and domain_batch is a list of
    ``(program, domain_label)`` with source:target counts in ``ratio`` and
    labels 0 (source) / 1 (target). ``n_pairs`` defaults to one clone pair
    per ratio unit (batch_size // sum(ratio)).
    """
    denom = ratio[0] + ratio[1]
    if batch_size % denom != 0 or batch_size < denom:
        raise ConfigError(
            f"batch_size must be a positive multiple of {denom}, got {batch_size}"
        )
    source_pool = [p for p in programs if p.language == source_lang]
    target_pool = [p for p in programs if p.language == target_lang]
    n_source = batch_size * ratio[0] // denom
    n_target = batch_size * ratio[1] // denom
    if len(source_pool) < n_source:
        raise SamplingError(
            f"need {n_source} programs in {source_lang!r}, have {len(source_pool)}"
        )
    if len(target_pool) < n_target:
        raise SamplingError(
            f"need {n_target} programs in {target_lang!r}, have {len(target_pool)}"
        )

    by_problem: dict[str, list[Program]] = {}
    for p in source_pool:
        by_problem.setdefault(p.problem_id, []).append(p)
    pair_problems = sorted(pid for pid, group in by_problem.items() if len(group) >= 2)
    if n_pairs is None:
        n_pairs = batch_size // denom
    if len(pair_problems) < n_pairs:
        raise SamplingError(
            f"need {n_pairs} problems with >=2 {source_lang!r} solutions, "
            f"have {len(pair_problems)}"
        )
    examples = []
    for pid in rng.sample(pair_problems, n_pairs):
        query, candidate = rng.sample(by_problem[pid], 2)
        examples.append(CloneExample(query.id, candidate.id, 1))

    domain_batch = [(p, 0) for p in rng.sample(source_pool, n_source)]
    domain_batch += [(p, 1) for p in rng.sample(target_pool, n_target)]
    return examples, domain_batch
