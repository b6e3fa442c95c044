"""Clone retrieval by cosine ranking plus MAP evaluation and embedding export.

Any object with ``embed_programs(programs) -> (n, d) tensor`` can act as the
embedder here, so trained states, loaded checkpoints, and the one-hot oracle
are interchangeable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import torch

from .corpus import Program
from .encoder import cosine_matrix
from .errors import ContractError, DataError, EvaluationError

FLOAT_FORMAT = "%.17g"


class Embedder(Protocol):
    def embed_programs(self, programs: Sequence[Program]) -> torch.Tensor: ...


class OneHotProblemEncoder:
    """Reference embedder: one-hot on problem id. Perfect by construction."""

    def __init__(self, problem_ids: Sequence[str]):
        self.index = {pid: i for i, pid in enumerate(sorted(set(problem_ids)))}

    def embed_programs(self, programs: Sequence[Program]) -> torch.Tensor:
        out = torch.zeros((len(programs), len(self.index)))
        for row, program in enumerate(programs):
            if program.problem_id not in self.index:
                raise DataError(f"unknown problem id {program.problem_id!r}")
            out[row, self.index[program.problem_id]] = 1.0
        return out


@dataclass
class RetrievalRun:
    """Per-query rankings over a candidate pool plus the relevant-id sets."""

    query_language: str
    candidate_language: str
    query_ids: list[str]
    rankings: dict[str, list[str]]
    relevance: dict[str, frozenset[str]]


@dataclass(frozen=True)
class MapResult:
    map: float
    num_queries: int
    num_excluded: int


def _order_candidates(similarities: Sequence[float], pool: Sequence[Program]) -> list[str]:
    order = sorted(
        range(len(pool)), key=lambda i: (-float(similarities[i]), pool[i].id)
    )
    return [pool[i].id for i in order]


def rank(query: Program, pool: Sequence[Program], embedder: Embedder) -> list[str]:
    """Candidate ids by descending cosine to the query; ties break by id."""
    if not pool:
        raise ContractError("rank requires a non-empty candidate pool")
    embeddings = embedder.embed_programs([query] + list(pool))
    sims = cosine_matrix(embeddings[:1], embeddings[1:])[0]
    return _order_candidates(sims.tolist(), pool)


def average_precision(ranking: Sequence[str], relevant: frozenset[str] | set[str]) -> float:
    """Mean of precision@k over the ranks k that hold a relevant candidate."""
    if not relevant:
        raise ContractError("average_precision requires a non-empty relevant set")
    hits = 0
    total = 0.0
    for k, candidate_id in enumerate(ranking, start=1):
        if candidate_id in relevant:
            hits += 1
            total += hits / k
    return total / len(relevant)


def map_score(run: RetrievalRun) -> MapResult:
    """Mean AP over queries with relevant candidates; the rest are counted out."""
    scores = []
    excluded = 0
    for qid in run.query_ids:
        relevant = run.relevance[qid]
        if not relevant:
            excluded += 1
            continue
        scores.append(average_precision(run.rankings[qid], relevant))
    if not scores:
        raise EvaluationError("no query has a relevant candidate in the pool")
    return MapResult(
        map=sum(scores) / len(scores), num_queries=len(scores), num_excluded=excluded
    )


def build_run(
    queries: Sequence[Program],
    pool: Sequence[Program],
    embedder: Embedder,
    candidate_language: str,
    exclude_self: bool = False,
) -> RetrievalRun:
    """Rank the full pool for every query in one embedding pass."""
    if not queries:
        raise EvaluationError("no queries to evaluate")
    if not pool:
        raise EvaluationError("empty candidate pool")
    embeddings = embedder.embed_programs(list(queries) + list(pool))
    query_embs = embeddings[: len(queries)]
    pool_embs = embeddings[len(queries) :]
    sims = cosine_matrix(query_embs, pool_embs)

    rankings: dict[str, list[str]] = {}
    relevance: dict[str, frozenset[str]] = {}
    for i, query in enumerate(queries):
        candidates = [
            (float(sims[i, j]), pool[j])
            for j in range(len(pool))
            if not (exclude_self and pool[j].id == query.id)
        ]
        candidates.sort(key=lambda item: (-item[0], item[1].id))
        rankings[query.id] = [program.id for _, program in candidates]
        relevance[query.id] = frozenset(
            program.id
            for _, program in candidates
            if program.problem_id == query.problem_id
        )
    return RetrievalRun(
        query_language=queries[0].language,
        candidate_language=candidate_language,
        query_ids=[q.id for q in queries],
        rankings=rankings,
        relevance=relevance,
    )


def evaluate(
    programs: Sequence[Program],
    embedder: Embedder,
    query_lang: str,
    cand_lang: str | None = None,
    mode: str = "cross",
    pool: str = "target-only",
) -> dict:
    """Score clone retrieval for one language pair and return a JSON-able report.

    ``mode="cross"`` ranks candidate-language programs for each query-language
    program; ``mode="mono"`` ranks same-language programs with the query
    removed from its own pool. ``pool="all"`` additionally admits every
    language into the candidate pool (cross mode only).
    """
    languages = sorted({p.language for p in programs})
    if query_lang not in languages:
        raise DataError(
            f"unknown query language {query_lang!r}; available: {', '.join(languages)}"
        )
    if mode not in ("cross", "mono"):
        raise DataError(f"unknown mode {mode!r}; expected 'cross' or 'mono'")
    if mode == "cross":
        if cand_lang is None:
            raise DataError("cross mode requires a candidate language")
        if cand_lang not in languages:
            raise DataError(
                f"unknown candidate language {cand_lang!r}; available: {', '.join(languages)}"
            )
        queries = [p for p in programs if p.language == query_lang]
        if pool == "all":
            candidates = list(programs)
        else:
            candidates = [p for p in programs if p.language == cand_lang]
        run = build_run(queries, candidates, embedder, cand_lang, exclude_self=(pool == "all"))
    else:
        cand_lang = query_lang
        queries = [p for p in programs if p.language == query_lang]
        candidates = list(queries)
        run = build_run(queries, candidates, embedder, cand_lang, exclude_self=True)
    result = map_score(run)
    per_query_pool = len(candidates) - (1 if mode == "mono" or pool == "all" else 0)
    return {
        "mode": mode,
        "query_language": query_lang,
        "candidate_language": cand_lang,
        "map": result.map,
        "num_queries": result.num_queries,
        "num_excluded_queries": result.num_excluded,
        "pool_size": len(candidates),
        "per_query_pool_size": per_query_pool,
    }


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    language: str
    problem_id: str
    values: tuple[float, ...]


def export_embeddings(
    programs: Sequence[Program], embedder: Embedder, path: str | Path
) -> None:
    """Write one tab-separated row per program: id, language, problem_id, floats.

    Floats are serialized with 17 significant digits, so reloading reproduces
    the exported values bit-exactly and re-export is byte-identical.
    """
    embeddings = embedder.embed_programs(list(programs))
    with open(path, "w", encoding="utf-8") as fh:
        for program, row in zip(programs, embeddings):
            floats = "\t".join(FLOAT_FORMAT % float(v) for v in row)
            fh.write(f"{program.id}\t{program.language}\t{program.problem_id}\t{floats}\n")


def load_embeddings(path: str | Path) -> list[EmbeddingRecord]:
    records = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 4:
                raise DataError(f"embedding file line {line_no}: too few columns")
            values = tuple(float(v) for v in parts[3:])
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DataError(f"embedding file line {line_no}: inconsistent dimension")
            records.append(
                EmbeddingRecord(
                    id=parts[0], language=parts[1], problem_id=parts[2], values=values
                )
            )
    return records
