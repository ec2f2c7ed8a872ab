"""Embedding backends and the nearest-case index."""

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dxchain.case_model import DiagnosisLabel, RawCase, ReferenceDiagnoses
from dxchain.embedding import MockEmbedder, RemoteEmbedder, cosine
from dxchain.errors import RetrievalError, TransportError
from dxchain.retrieval import (
    SNIPPET_CHARS,
    build_index,
    load_index,
    retrieve,
    save_index,
)


def make_case(case_id, primary="Pneumonia", text="cough and fever"):
    label = DiagnosisLabel(name=primary, icd10_code=None)
    return RawCase(
        case_id=case_id,
        raw_text=text,
        reference=ReferenceDiagnoses(primary=label, all=(label,)),
    )


ABSTRACTS = {
    "R1": "Fever, productive cough, and a lobar infiltrate on the radiograph.",
    "R2": "Flank pain with pyuria and costovertebral angle tenderness.",
    "R3": "Fever with productive cough and crackles over the right base.",
}


def corpus():
    return [make_case(cid) for cid in sorted(ABSTRACTS)]


def abstract_for(case):
    return ABSTRACTS[case.case_id]


# ---------------------------------------------------------------------------
# Cosine and the mock embedder


def test_cosine_handles_zero_vectors():
    assert cosine(np.zeros(4), np.ones(4)) == 0.0
    assert cosine(np.ones(4), np.zeros(4)) == 0.0


def test_cosine_is_clamped():
    u = np.array([1.0, 0.0])
    assert cosine(u, u) == 1.0
    assert cosine(u, -u) == -1.0


def test_mock_embedder_is_deterministic_and_normalized():
    embedder = MockEmbedder()
    a = embedder.embed(["chest pain", "chest pain"])
    b = MockEmbedder().embed(["chest pain"])
    assert np.array_equal(a[0], a[1])
    assert np.array_equal(a[0], b[0])
    assert a.shape == (2, 256)
    assert np.linalg.norm(a[0]) == pytest.approx(1.0)


def test_mock_embedder_is_case_insensitive():
    embedder = MockEmbedder()
    vectors = embedder.embed(["Chest Pain", "chest pain"])
    assert cosine(vectors[0], vectors[1]) == 1.0


def test_mock_embedder_separates_unrelated_text():
    embedder = MockEmbedder()
    vectors = embedder.embed(["crushing chest pain", "elective knee arthroplasty"])
    assert cosine(vectors[0], vectors[1]) < 0.5


def test_mock_embedder_rewards_shared_phrasing():
    embedder = MockEmbedder()
    vectors = embedder.embed([
        "fever and productive cough",
        "fever and productive coughing",
        "painless jaundice",
    ])
    near = cosine(vectors[0], vectors[1])
    far = cosine(vectors[0], vectors[2])
    assert near > 0.8
    assert near > far


def test_mock_embedder_rejects_bad_dimension():
    with pytest.raises(ValueError):
        MockEmbedder(dimension=0)


@given(st.text(max_size=40))
def test_mock_embedder_self_similarity(text):
    embedder = MockEmbedder(dimension=64)
    vectors = embedder.embed([text, text])
    assert cosine(vectors[0], vectors[1]) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Remote embedder


def embeddings_body(vectors):
    return json.dumps({"data": [{"embedding": list(v)} for v in vectors]})


def make_remote_embedder(responses, sleeps=None, **kwargs):
    calls = []

    def transport(url, headers, payload, timeout):
        calls.append({"url": url, "headers": headers, "payload": payload})
        result = responses.pop(0)
        if isinstance(result, Exception):
            raise result
        return result

    embedder = RemoteEmbedder(
        "https://unit.test/embeddings", "embed-1",
        transport=transport,
        sleeper=(sleeps.append if sleeps is not None else lambda s: None),
        **kwargs,
    )
    return embedder, calls


def test_remote_embedder_parses_vectors_and_dimension():
    embedder, calls = make_remote_embedder(
        [(200, embeddings_body([[1.0, 0.0], [0.0, 1.0]]))]
    )
    vectors = embedder.embed(["a", "b"])
    assert vectors.shape == (2, 2)
    assert embedder.dimension == 2
    assert calls[0]["payload"] == {"model": "embed-1", "input": ["a", "b"]}
    assert "Authorization" not in calls[0]["headers"]


def test_remote_embedder_sends_bearer_key_when_configured():
    embedder, calls = make_remote_embedder(
        [(200, embeddings_body([[1.0]]))], api_key="sk-embed"
    )
    embedder.embed(["a"])
    assert calls[0]["headers"]["Authorization"] == "Bearer sk-embed"


def test_remote_embedder_retries_then_succeeds():
    sleeps = []
    embedder, calls = make_remote_embedder(
        [(429, ""), (200, embeddings_body([[1.0]]))], sleeps=sleeps
    )
    assert embedder.embed(["a"]).shape == (1, 1)
    assert len(calls) == 2
    assert sleeps == [0.5]


def test_remote_embedder_gives_up_after_budget():
    embedder, _ = make_remote_embedder([(503, "")] * 3, retry_limit=2)
    with pytest.raises(TransportError) as exc_info:
        embedder.embed(["a"])
    assert exc_info.value.attempts == 3


def test_remote_embedder_rejects_count_mismatch():
    embedder, _ = make_remote_embedder([(200, embeddings_body([[1.0]]))])
    with pytest.raises(TransportError, match="does not match input"):
        embedder.embed(["a", "b"])


def test_remote_embedder_rejects_malformed_body():
    embedder, _ = make_remote_embedder([(200, "{\"data\": \"nope\"}")])
    with pytest.raises(TransportError, match="malformed"):
        embedder.embed(["a"])


# ---------------------------------------------------------------------------
# Index construction


def test_build_index_embeds_every_corpus_abstract():
    index = build_index(corpus(), MockEmbedder(), abstract_for)
    assert index.case_ids == ("R1", "R2", "R3")
    assert index.vectors.shape == (3, 256)
    assert index.dimension == 256
    assert index.snippets[0] == ABSTRACTS["R1"]
    assert index.reference_primaries == ("Pneumonia",) * 3
    assert len(index) == 3


def test_build_index_truncates_snippets():
    long_abstract = "x" * (SNIPPET_CHARS + 100)
    index = build_index([make_case("R1")], MockEmbedder(), lambda c: long_abstract)
    assert len(index.snippets[0]) == SNIPPET_CHARS


def test_build_index_rejects_empty_corpus():
    with pytest.raises(RetrievalError, match="corpus is empty"):
        build_index([], MockEmbedder(), abstract_for)


def test_build_index_requires_an_abstract_per_case():
    with pytest.raises(RetrievalError, match="no abstract available for corpus case 'R2'"):
        build_index(corpus(), MockEmbedder(), lambda c: "" if c.case_id == "R2" else "text")


def test_build_index_wraps_embedder_failures():
    class FailingEmbedder:
        def embed(self, texts):
            raise RuntimeError("socket closed")

    with pytest.raises(RetrievalError, match=r"cases R1\.\.R3.*socket closed"):
        build_index(corpus(), FailingEmbedder(), abstract_for)


# ---------------------------------------------------------------------------
# Retrieval


def test_retrieve_ranks_by_similarity():
    index = build_index(corpus(), MockEmbedder(), abstract_for)
    results = retrieve(
        index, "Fever with a productive cough and a right-sided infiltrate.",
        k=2, embedder=MockEmbedder(),
    )
    assert [r.case_id for r in results] == ["R1", "R3"] or \
        [r.case_id for r in results] == ["R3", "R1"]
    assert results[0].similarity >= results[1].similarity
    assert results[0].similarity > 0.5
    assert results[0].reference_primary == "Pneumonia"


def test_retrieve_never_exceeds_the_corpus():
    index = build_index(corpus(), MockEmbedder(), abstract_for)
    results = retrieve(index, "anything", k=10, embedder=MockEmbedder())
    assert len(results) == 3


def test_retrieve_breaks_ties_by_case_id():
    # Identical abstracts give identical similarities; order falls back to id.
    cases = [make_case(cid) for cid in ("Z9", "A1", "M5")]
    index = build_index(cases, MockEmbedder(), lambda c: "the same abstract")
    results = retrieve(index, "the same abstract", k=3, embedder=MockEmbedder())
    assert [r.case_id for r in results] == ["A1", "M5", "Z9"]
    assert results[0].similarity == pytest.approx(1.0)


def test_retrieve_rejects_bad_k():
    index = build_index(corpus(), MockEmbedder(), abstract_for)
    with pytest.raises(ValueError):
        retrieve(index, "query", k=0, embedder=MockEmbedder())


def test_retrieved_case_to_dict():
    index = build_index(corpus(), MockEmbedder(), abstract_for)
    result = retrieve(index, ABSTRACTS["R2"], k=1, embedder=MockEmbedder())[0]
    as_dict = result.to_dict()
    assert as_dict["case_id"] == "R2"
    assert as_dict["similarity"] == pytest.approx(1.0)
    assert set(as_dict) == {"case_id", "similarity", "snippet", "reference_primary"}


# ---------------------------------------------------------------------------
# Persistence


def test_index_round_trips_through_disk(tmp_path):
    index = build_index(corpus(), MockEmbedder(), abstract_for)
    path = tmp_path / "index.jsonl"
    save_index(index, path)
    loaded = load_index(path)
    assert loaded.case_ids == index.case_ids
    assert np.allclose(loaded.vectors, index.vectors)
    assert loaded.snippets == index.snippets
    assert loaded.reference_primaries == index.reference_primaries
    assert loaded.dimension == index.dimension
    # Retrieval over the loaded index behaves identically.
    before = retrieve(index, ABSTRACTS["R2"], k=2, embedder=MockEmbedder())
    after = retrieve(loaded, ABSTRACTS["R2"], k=2, embedder=MockEmbedder())
    assert before == after


def test_load_index_rejects_empty_files(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("\n\n", encoding="utf-8")
    with pytest.raises(RetrievalError, match="is empty"):
        load_index(path)
