"""Corpus BLEU-4, CIDEr and cosine nearest neighbours.

BLEU is corpus level with uniform weights over n = 1..4, clipped counts and
the closest-reference-length brevity penalty, reported x100.  Orders for
which the candidates contain no n-grams at all are left out of the geometric
mean, so a three-word corpus is scored on n = 1..3.

CIDEr follows the original (non -D) definition: per order, TF-IDF vectors
with ``idf = log(|items| / df)`` where ``df`` counts the items whose
references contain the n-gram; cosine similarity against each reference,
averaged over orders, then references and items; reported x10.  An order
at which neither sentence has any n-gram is left out of the average, and
two identical non-empty n-gram multisets score similarity 1 even when their
TF-IDF vectors vanish (a one-item corpus has idf 0 everywhere).  Tokens are
lowercased; no stemming.
"""
from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

import numpy as np

from .dataio import EmbeddingTable

MAX_N = 4


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _as_ref_lists(references) -> list[list[list[str]]]:
    """Accept one reference per item or a list of references per item."""
    out = []
    for ref in references:
        if ref and isinstance(ref[0], str):
            out.append([list(ref)])
        else:
            out.append([list(r) for r in ref])
    return out


def _lower(tokens):
    return [t.lower() for t in tokens]


def bleu(candidates: Sequence[Sequence[str]], references, max_n: int = MAX_N) -> float:
    """Corpus-level BLEU in [0, 100]."""
    if not candidates:
        raise ValueError("empty candidate list")
    refs = _as_ref_lists(references)
    if len(refs) != len(candidates):
        raise ValueError(f"{len(candidates)} candidates but {len(refs)} reference sets")
    if any(not r for r in refs):
        raise ValueError("every item needs at least one reference")
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for cand, rs in zip(candidates, refs):
        cand = _lower(cand)
        rs = [_lower(r) for r in rs]
        cand_len += len(cand)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in rs)[1]
        for n in range(1, max_n + 1):
            c = ngrams(cand, n)
            best = Counter()
            for r in rs:
                best |= ngrams(r, n)
            matched[n - 1] += sum(min(k, best[g]) for g, k in c.items())
            total[n - 1] += sum(c.values())
    orders = [n for n in range(max_n) if total[n] > 0]
    if not orders or any(matched[n] == 0 for n in orders):
        return 0.0
    log_p = sum(math.log(matched[n] / total[n]) for n in orders) / len(orders)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p)


def document_frequency(references, max_n: int = MAX_N) -> list[Counter]:
    """Per order, the number of items whose reference set contains each n-gram."""
    df = [Counter() for _ in range(max_n)]
    for rs in _as_ref_lists(references):
        for n in range(1, max_n + 1):
            seen = set()
            for r in rs:
                seen.update(ngrams(_lower(r), n))
            df[n - 1].update(seen)
    return df


def _tfidf(counts: Counter, df: Counter, n_items: int) -> dict:
    total = sum(counts.values())
    return {g: (k / total) * math.log(n_items / max(df[g], 1.0)) for g, k in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider_items(candidates, references, max_n: int = MAX_N) -> list[float]:
    """Per-item CIDEr (x10 scale)."""
    refs = _as_ref_lists(references)
    if not candidates or not refs:
        raise ValueError("empty inputs")
    if len(refs) != len(candidates):
        raise ValueError(f"{len(candidates)} candidates but {len(refs)} reference sets")
    if any(not r for r in refs):
        raise ValueError("every item needs at least one reference")
    df = document_frequency(refs, max_n)
    n_items = len(refs)
    scores = []
    for cand, rs in zip(candidates, refs):
        cand = _lower(cand)
        per_ref = []
        for r in rs:
            r = _lower(r)
            sims = []
            for n in range(1, max_n + 1):
                c, rc = ngrams(cand, n), ngrams(r, n)
                if not c and not rc:
                    continue
                if c == rc:
                    sims.append(1.0)
                else:
                    sims.append(_cosine(_tfidf(c, df[n - 1], n_items), _tfidf(rc, df[n - 1], n_items)))
            # both empty: identical, nothing to compare
            per_ref.append(sum(sims) / len(sims) if sims else 1.0)
        scores.append(10.0 * sum(per_ref) / len(per_ref))
    return scores


def cider(candidates, references, max_n: int = MAX_N) -> float:
    """Corpus CIDEr: mean of per-item scores, x10."""
    items = cider_items(candidates, references, max_n)
    return sum(items) / len(items)


def cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine of a zero vector")
    return float(a @ b / (na * nb))


def nearest_neighbors(query, table: EmbeddingTable, k: int = 5, exclude_query: bool = False):
    """Top-``k`` ``(token, cosine)`` pairs, descending; ties keep table order.

    ``query`` is a token of ``table`` or a raw vector.  ``exclude_query``
    drops the query token itself from the ranking.
    """
    skip = None
    if isinstance(query, str):
        if query not in table:
            raise KeyError(f"token {query!r} not in table")
        skip = table.index(query) if exclude_query else None
        q = table.vector(query)
    else:
        q = np.asarray(query, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ValueError("query vector has zero norm")
    norms = np.linalg.norm(table.vectors, axis=1)
    if np.any(norms == 0.0):
        bad = table.tokens[int(np.argmax(norms == 0.0))]
        raise ValueError(f"table row {bad!r} has zero norm")
    limit = len(table) - (skip is not None)
    if not 1 <= k <= limit:
        raise ValueError(f"k must be in [1, {limit}], got {k}")
    sims = table.vectors @ q / (norms * qn)
    order = [i for i in np.argsort(-sims, kind="stable") if i != skip][:k]
    return [(table.tokens[i], float(sims[i])) for i in order]
