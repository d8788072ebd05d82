"""Greedy and beam-search story generation.

Sentences are produced one after another.  The sentence layer is fed the
mean word vector of the previously *generated* sentence (``s0`` before the
first sentence, or after an empty one).  Within a sentence, beam search runs
over the word layer; a hypothesis ends when it emits <NULL> or reaches ``L``
words.  Scores are raw summed log-probabilities, without length
normalisation.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .dataio import NULL, sentence_vector_of
from .decoder import (ModelParameters, WordContext, output_logits, project_features,
                      sentence_start, sentence_step, word_start, word_step)
from .numerics import Tensor
from .recurrent import CellState


@dataclass
class Hypothesis:
    """A partial sentence. ``tokens`` includes the terminating <NULL> once complete."""

    tokens: tuple[int, ...]
    logprob: float
    state: CellState
    per_word_probs: tuple[float, ...] = ()
    complete: bool = False


@dataclass
class SentenceResult:
    tokens: list[str]           # surface form, no <NULL>
    token_ids: list[int]        # as decoded, terminating <NULL> included
    word_probs: list[float]     # aligned with token_ids
    logprob: float
    finished: list[Hypothesis] = field(default_factory=list, repr=False)


@dataclass
class GeneratedStory:
    story_id: str
    sentences: list[SentenceResult]

    @property
    def logprob(self) -> float:
        return sum(s.logprob for s in self.sentences)

    def to_json(self) -> dict:
        return {
            "story_id": self.story_id,
            "sentences": [s.tokens for s in self.sentences],
            "word_probs": [s.word_probs for s in self.sentences],
            "logprob": self.logprob,
        }


def _log_probs(state: CellState, params: ModelParameters) -> np.ndarray:
    return nx.log_softmax(output_logits(state.h, params), axis=-1).data


def _input_vectors(h_s: Tensor, hyps: list[Hypothesis], params: ModelParameters) -> np.ndarray:
    if not hyps[0].tokens:
        return np.broadcast_to(h_s.data, (len(hyps), h_s.shape[-1]))
    return params.word_table.data[[h.tokens[-1] for h in hyps]]


def _stack_state(hyps: list[Hypothesis]) -> CellState:
    return CellState(Tensor(np.stack([h.state.h.data for h in hyps])),
                     Tensor(np.stack([h.state.c.data for h in hyps])))


def _tile(ctx: WordContext, n: int) -> WordContext:
    return WordContext(Tensor(np.broadcast_to(ctx.locations.data, (n,) + ctx.locations.shape)),
                       Tensor(np.broadcast_to(ctx.keys.data, (n,) + ctx.keys.shape)))


def beam_search(h_s: Tensor, per_image: Tensor, params: ModelParameters, beam: int,
                max_len: int) -> SentenceResult:
    """Decode one sentence from sentence-layer output ``h_s`` (shape ``(D,)``).

    Each round expands every live hypothesis by every token and keeps the
    ``beam`` best candidates by ``(logprob desc, token ids asc)``; kept
    candidates that end in <NULL> or reach ``max_len`` are set aside as
    finished.  The best finished hypothesis wins under the same ordering.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    null = params.null_id
    with nx.no_grad():
        state0, ctx = word_start(per_image, params)
        live = [Hypothesis((), 0.0, state0)]
        finished: list[Hypothesis] = []
        for _ in range(max_len):
            if not live:
                break
            # no live hypothesis can overtake: scores only decrease
            if finished and max(f.logprob for f in finished) > max(h.logprob for h in live):
                break
            prev = _stack_state(live)
            v = _input_vectors(h_s, live, params)
            state, _ = word_step(Tensor(v), prev, _tile(ctx, len(live)), params)
            logp = _log_probs(state, params)
            cand = []
            for i, hyp in enumerate(live):
                for j in range(logp.shape[1]):
                    cand.append((-(hyp.logprob + logp[i, j]), hyp.tokens + (j,), i))
            cand.sort(key=lambda c: (c[0], c[1]))
            nxt = []
            for neg, toks, i in cand[:beam]:
                j = toks[-1]
                hyp = Hypothesis(
                    tokens=toks, logprob=-neg,
                    state=CellState(Tensor(state.h.data[i]), Tensor(state.c.data[i])),
                    per_word_probs=live[i].per_word_probs + (math.exp(logp[i, j]),),
                )
                if j == null or len(toks) == max_len:
                    hyp.complete = True
                    finished.append(hyp)
                else:
                    nxt.append(hyp)
            live = nxt
    best = min(finished, key=lambda h: (-h.logprob, h.tokens))
    return SentenceResult(
        tokens=[params.words[t] for t in best.tokens if t != null],
        token_ids=list(best.tokens),
        word_probs=list(best.per_word_probs),
        logprob=best.logprob,
        finished=finished,
    )


def greedy_decode(h_s: Tensor, per_image: Tensor, params: ModelParameters, max_len: int) -> SentenceResult:
    """Argmax at every step (lowest id on ties) until <NULL> or ``max_len``."""
    ids, probs, total = [], [], 0.0
    with nx.no_grad():
        state, ctx = word_start(per_image, params)
        v = h_s
        for _ in range(max_len):
            state, _ = word_step(v, state, ctx, params)
            logp = _log_probs(state, params)
            j = int(np.argmax(logp))
            ids.append(j)
            probs.append(math.exp(logp[j]))
            total += float(logp[j])
            if j == params.null_id:
                break
            v = params.word_table.data[j]
    return SentenceResult([params.words[t] for t in ids if t != params.null_id], ids, probs, total)


def generate_story(features, params: ModelParameters, beam: int = 1, max_len: int = 15,
                   story_id: str = "", decoder=None) -> GeneratedStory:
    """Generate N sentences for a story's raw feature grids ``(N, M, D_raw)``.

    ``decoder(h_s, per_image, params) -> SentenceResult`` replaces beam search
    when given.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    words = params.word_table_view()
    sentences = []
    with nx.no_grad():
        bundle = project_features(features, params)
        state = sentence_start(bundle, params)
        prev = params.s0.data
        for t in range(bundle.image_vectors.shape[0]):
            state = sentence_step(Tensor(prev), bundle.image_vectors[t], state, params)
            per_image = bundle.per_image[t]
            if decoder is not None:
                res = decoder(state.h, per_image, params)
            else:
                res = beam_search(state.h, per_image, params, beam, max_len)
            sentences.append(res)
            prev = sentence_vector_of(res.tokens, words) if res.tokens else params.s0.data
    return GeneratedStory(story_id, sentences)


def generate_corpus(records, params: ModelParameters, beam: int = 1, max_len: int = 15,
                    jobs: int = 1) -> list[GeneratedStory]:
    """Generate for every record; output order follows input order for any ``jobs``."""
    def one(rec):
        return generate_story(rec.features, params, beam, max_len, rec.story_id)

    if jobs <= 1:
        return [one(r) for r in records]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, records))
