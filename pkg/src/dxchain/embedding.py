"""Embedding backends: a deterministic trigram mock and a remote client.

The mock is the default everywhere tests need stable similarities: identical
strings embed identically (cosine 1.0) and near-matches share trigram mass.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from typing import Callable

import numpy as np
import requests

from .errors import TransportError

logger = logging.getLogger(__name__)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    value = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, value))


def _bucket(trigram: str, dimension: int) -> int:
    digest = hashlib.blake2b(trigram.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dimension


class MockEmbedder:
    """Character-trigram hash histogram, L2-normalized.

    Stable across processes (the hash is not Python's randomized one).
    """

    kind = "deterministic-mock"

    def __init__(self, dimension: int = 256):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension

    def embed(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for row, text in enumerate(texts):
            padded = f"##{text.lower()}##"
            for i in range(len(padded) - 2):
                out[row, _bucket(padded[i : i + 3], self.dimension)] += 1.0
            norm = np.linalg.norm(out[row])
            if norm:
                out[row] /= norm
        return out


class RemoteEmbedder:
    """OpenAI-style embeddings endpoint; retries transient failures."""

    kind = "remote"

    def __init__(
        self,
        endpoint_url: str,
        model_id: str,
        api_key: str = "",
        retry_limit: int = 3,
        backoff_base: float = 0.5,
        timeout: float = 60.0,
        transport: Callable[[str, dict, dict, float], tuple[int, str]] | None = None,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.endpoint_url = endpoint_url
        self.model_id = model_id
        self.api_key = api_key
        self.retry_limit = retry_limit
        self.backoff_base = backoff_base
        self.timeout = timeout
        self._transport = transport or self._post
        self._sleeper = sleeper
        self.dimension = 0

    @staticmethod
    def _post(url: str, headers: dict, payload: dict, timeout: float) -> tuple[int, str]:
        resp = requests.post(url, headers=headers, json=payload, timeout=timeout)
        return resp.status_code, resp.text

    def embed(self, texts: list[str]) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.model_id, "input": list(texts)}
        last_error = ""
        attempts = 0
        for attempt in range(self.retry_limit + 1):
            attempts = attempt + 1
            if attempt:
                self._sleeper(self.backoff_base * (2 ** (attempt - 1)))
            try:
                status, body = self._transport(self.endpoint_url, headers, payload, self.timeout)
            except requests.RequestException as exc:
                last_error = f"connection error: {exc}"
                continue
            if status in (429, 500, 502, 503, 504):
                last_error = f"HTTP {status}"
                continue
            if status != 200:
                raise TransportError(f"HTTP {status}: {body[:200]}", attempts=attempts)
            try:
                doc = json.loads(body)
                vectors = np.array([d["embedding"] for d in doc["data"]], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise TransportError(f"malformed embeddings body: {body[:200]}", attempts=attempts)
            if vectors.ndim != 2 or vectors.shape[0] != len(texts):
                raise TransportError("embedding count does not match input", attempts=attempts)
            self.dimension = vectors.shape[1]
            return vectors
        raise TransportError(last_error or "no attempts made", attempts=attempts)
