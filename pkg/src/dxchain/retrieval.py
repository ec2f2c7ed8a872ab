"""Case-based retrieval: embed corpus abstracts, return the nearest cases.

The index is built strictly from the held-out retrieval corpus, so a test
case can never retrieve itself or another test case.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .case_model import RawCase
from .errors import RetrievalError
from .embedding import cosine

logger = logging.getLogger(__name__)

SNIPPET_CHARS = 512


@dataclass(frozen=True)
class RetrievedCase:
    case_id: str
    similarity: float
    snippet: str
    reference_primary: str

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "similarity": self.similarity,
            "snippet": self.snippet,
            "reference_primary": self.reference_primary,
        }


@dataclass(frozen=True)
class CaseIndex:
    case_ids: tuple[str, ...]
    vectors: np.ndarray
    snippets: tuple[str, ...]
    reference_primaries: tuple[str, ...]
    dimension: int

    def __len__(self) -> int:
        return len(self.case_ids)


def build_index(
    corpus: list[RawCase],
    embedder,
    abstract_text_fn: Callable[[RawCase], str],
) -> CaseIndex:
    """One entry per corpus case; snippet is the head of its abstract."""
    if not corpus:
        raise RetrievalError("retrieval corpus is empty")
    ids = [case.case_id for case in corpus]
    texts = []
    for case in corpus:
        text = abstract_text_fn(case)
        if not text or not text.strip():
            raise RetrievalError(f"no abstract available for corpus case {case.case_id!r}")
        texts.append(text)
    try:
        vectors = embedder.embed(texts)
    except Exception as exc:
        raise RetrievalError(f"embedding the corpus failed (cases {ids[0]}..{ids[-1]}): {exc}")
    return CaseIndex(
        case_ids=tuple(ids),
        vectors=np.asarray(vectors, dtype=np.float64),
        snippets=tuple(text[:SNIPPET_CHARS] for text in texts),
        reference_primaries=tuple(case.reference.primary.name for case in corpus),
        dimension=int(vectors.shape[1]),
    )


def retrieve(index: CaseIndex, query_text: str, k: int, embedder) -> list[RetrievedCase]:
    """Top-k corpus cases by cosine similarity; ties go to the lower case_id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    query = embedder.embed([query_text])[0]
    scored = [
        (cosine(query, index.vectors[i]), index.case_ids[i], i)
        for i in range(len(index))
    ]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [
        RetrievedCase(
            case_id=case_id,
            similarity=similarity,
            snippet=index.snippets[i],
            reference_primary=index.reference_primaries[i],
        )
        for similarity, case_id, i in scored[:k]
    ]


def save_index(index: CaseIndex, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for i in range(len(index)):
            fh.write(json.dumps({
                "case_id": index.case_ids[i],
                "vector": index.vectors[i].tolist(),
                "snippet": index.snippets[i],
                "reference_primary": index.reference_primaries[i],
            }, ensure_ascii=False) + "\n")


def load_index(path: str | Path) -> CaseIndex:
    ids: list[str] = []
    vectors: list[list[float]] = []
    snippets: list[str] = []
    primaries: list[str] = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            entry = json.loads(line)
            ids.append(entry["case_id"])
            vectors.append(entry["vector"])
            snippets.append(entry["snippet"])
            primaries.append(entry["reference_primary"])
    if not ids:
        raise RetrievalError(f"index file {path} is empty")
    matrix = np.asarray(vectors, dtype=np.float64)
    return CaseIndex(
        case_ids=tuple(ids),
        vectors=matrix,
        snippets=tuple(snippets),
        reference_primaries=tuple(primaries),
        dimension=int(matrix.shape[1]),
    )
