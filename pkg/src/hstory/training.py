"""Masked cross-entropy, Adam with global-norm clipping, and the training loop."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .dataio import NULL, EmbeddingTable, StoryRecord, sentence_vector_of
from .decoder import ModelParameters, story_logits
from .numerics import Tensor

log = logging.getLogger(__name__)

EMBEDDING_TABLES = ("word_table", "sentence_table")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    dropout_p: float = 0.4
    learning_rate: float = 1e-3
    epochs: int = 30
    seed: int = 0
    grad_clip_norm: float = 5.0
    L: int = 15
    N: int = 5
    D: int = 64
    M: int = 9
    D_raw: int = 32
    vocab_size: int = 60
    attn_dim: int | None = None
    freeze_embeddings: bool = False
    include_stop: bool = True

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.L < 1 or self.N < 1:
            raise ValueError("epochs must be >= 0, L and N >= 1")
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0:
            raise ValueError("learning_rate and grad_clip_norm must be positive")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """Sizes and hyperparameters of the full-scale setup (VGG16 conv5 grid, BERT-base width)."""
        base = dict(batch_size=16, dropout_p=0.4, learning_rate=1e-3, L=15, N=5,
                    D=768, M=196, D_raw=512, vocab_size=18000)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------- loss


@dataclass
class Batch:
    features: np.ndarray    # (B, N, M, D_raw)
    gold_ids: np.ndarray    # (B, N, L)
    masks: np.ndarray       # (B, N, L)
    sentence_ids: np.ndarray  # (B, N) rows of the sentence table


def sentence_key(words: Sequence[str]) -> str:
    return " ".join(words)


def make_batch(records: Sequence[StoryRecord], params: ModelParameters) -> Batch:
    feats = np.stack([r.features for r in records])
    gold = np.stack([[params.word_ids(s) for s in r.sentences] for r in records])
    masks = np.stack([r.masks for r in records]).astype(np.float64)
    try:
        sids = np.array([[params.sentence_index[sentence_key(r.words(i))] for i in range(r.n_images)]
                         for r in records], dtype=np.int64)
    except KeyError as e:
        raise KeyError(f"sentence {e.args[0]!r} missing from the sentence table") from None
    return Batch(feats, gold, masks, sids)


def dropout_masks(rngs: Sequence[np.random.Generator], p: float, shape) -> np.ndarray | None:
    """Inverted-dropout masks, one independent stream per story."""
    if p == 0.0:
        return None
    return np.stack([(rng.random(shape) >= p) / (1.0 - p) for rng in rngs])


def loss_weights(masks: np.ndarray, include_stop: bool) -> np.ndarray:
    """Per-position loss weights: the mask, optionally plus the first padding slot.

    The extra slot makes <NULL> a trained target right after the last word so
    decoding learns where to stop; sentences filling all ``L`` slots (or with
    no words) get no stop target.
    """
    weights = np.asarray(masks, dtype=np.float64).copy()
    if include_stop:
        L = weights.shape[-1]
        has_words = weights.any(axis=-1)
        # one past the last real word, robust to masked-out holes
        end = L - np.argmax(weights[..., ::-1] > 0, axis=-1)
        idx = np.nonzero(has_words & (end < L))
        weights[idx + (end[idx],)] = 1.0
    return weights


def batch_forward(batch: Batch, params: ModelParameters, dropout_mask=None,
                  include_stop: bool = False):
    """Per-story summed NLL ``(B,)`` plus masked argmax hits and token counts."""
    sent_vecs = nx.take_rows(params.sentence_table, batch.sentence_ids)
    logits = story_logits(batch.features, sent_vecs, batch.gold_ids, params, dropout_mask)
    weights = loss_weights(batch.masks, include_stop)
    per_story = None
    correct = 0
    for t, lg in enumerate(logits):
        gold_t, mask_t = batch.gold_ids[:, t, :], batch.masks[:, t, :]
        nll = nx.pick(nx.log_softmax(lg, axis=-1), gold_t) * -1.0
        s = nx.tsum(nll * weights[:, t, :], axis=-1)
        per_story = s if per_story is None else per_story + s
        correct += int(((lg.data.argmax(axis=-1) == gold_t) * mask_t).sum())
    return per_story, correct, int(batch.masks.sum())


def batch_loss(records: Sequence[StoryRecord], params: ModelParameters, dropout_p: float = 0.0,
               rngs: Sequence[np.random.Generator] | None = None,
               include_stop: bool = False) -> Tensor:
    """Mean over the batch of per-story summed masked NLL."""
    batch = make_batch(records, params)
    mask = None
    if dropout_p > 0.0:
        if rngs is None:
            raise ValueError("dropout needs one rng per story")
        mask = dropout_masks(rngs, dropout_p, batch.gold_ids.shape[1:] + (params.dim,))
    per_story, _, _ = batch_forward(batch, params, mask, include_stop)
    return nx.tsum(per_story) * (1.0 / len(records))


def story_loss(record: StoryRecord, params: ModelParameters, dropout_p: float = 0.0,
               rng: np.random.Generator | None = None, include_stop: bool = False) -> Tensor:
    """``-sum_i sum_k mask[i,k] log p(w_ik | x, w_i<k)`` for one story, as a graph scalar.

    ``include_stop`` also scores the <NULL> that ends each sentence.
    """
    return batch_loss([record], params, dropout_p, None if rng is None else [rng], include_stop)


def paper_eq6_score(record: StoryRecord, params: ModelParameters) -> float:
    """Sum over sentences of each sentence's joint probability (reporting only, not trained)."""
    with nx.no_grad():
        batch = make_batch([record], params)
        sent_vecs = nx.take_rows(params.sentence_table, batch.sentence_ids)
        logits = story_logits(batch.features, sent_vecs, batch.gold_ids, params)
    total = 0.0
    for t, lg in enumerate(logits):
        lp = nx.log_softmax(lg, axis=-1).data[0]
        picked = lp[np.arange(lp.shape[0]), batch.gold_ids[0, t]]
        total += math.exp(float((picked * batch.masks[0, t]).sum()))
    return total


def extend_sentence_table(params: ModelParameters, records: Sequence[StoryRecord]) -> ModelParameters:
    """Add rows (mean of word vectors) for corpus sentences missing from the table."""
    words = params.word_table_view()
    missing = []
    for r in records:
        for i in range(r.n_images):
            key = sentence_key(r.words(i))
            if key not in params.sentence_index and key not in missing:
                missing.append(key)
    if not missing and "sentence_table" in params.tensors:
        return params
    old = params.tensors["sentence_table"].data if "sentence_table" in params.tensors else np.zeros((0, params.dim))
    rows = []
    for key in missing:
        toks = key.split(" ") if key else []
        rows.append(sentence_vector_of(toks, words) if toks else params.s0.data.copy())
    tensors = dict(params.tensors)
    tensors["sentence_table"] = Tensor(np.concatenate([old, np.array(rows).reshape(-1, params.dim)]))
    return ModelParameters(tensors, params.words, params.sentences + missing)


# ----------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, clip_norm: float | None = None) -> AdamState:
    """Bias-corrected Adam; updates ``params`` arrays in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
    grads = dict(grads)
    if clip_norm is not None:
        clip_global_norm(grads, clip_norm)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------- train


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float       # per scored position (words, plus stops when trained)
    token_accuracy: float


@dataclass
class TrainResult:
    params: ModelParameters
    log: list[EpochLog]
    checkpoints: list[Path]


def write_loss_csv(path, rows: Sequence[EpochLog]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "token_accuracy"])
        for r in rows:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.token_accuracy)])


def trainable_names(params: ModelParameters, config: TrainConfig) -> list[str]:
    names = [n for n in params.tensors]
    if config.freeze_embeddings:
        names = [n for n in names if n not in EMBEDDING_TABLES]
    return names


def train(corpus: Sequence[StoryRecord], config: TrainConfig, word_table: EmbeddingTable,
          sentence_table: EmbeddingTable | None = None, out_dir=None,
          params: ModelParameters | None = None) -> TrainResult:
    """Fit the decoder on ``corpus``.

    Shuffling uses ``default_rng([seed, epoch])`` and each story's dropout
    stream ``default_rng([seed, epoch, story_position])``, so the run is a
    pure function of ``config.seed``.  With ``out_dir`` set, writes
    ``epoch_0000.ckpt`` (initial), one checkpoint per epoch and ``loss.csv``.
    """
    if not corpus:
        raise ValueError("cannot train on an empty corpus")
    if params is None:
        params = ModelParameters.init(config.seed, corpus[0].features.shape[-1], word_table,
                                      sentence_table, attn_dim=config.attn_dim)
    params = extend_sentence_table(params, corpus)
    out = Path(out_dir) if out_dir is not None else None
    checkpoints: list[Path] = []

    def checkpoint(epoch):
        if out is not None:
            path = out / f"epoch_{epoch:04d}.ckpt"
            params.save(path)
            checkpoints.append(path)

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    checkpoint(0)
    names = trainable_names(params, config)
    arrays = {n: params[n].data for n in names}
    state = AdamState()
    rows: list[EpochLog] = []
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(corpus))
        total_loss, total_weight, total_correct, total_tokens = 0.0, 0.0, 0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            records = [corpus[i] for i in idx]
            batch = make_batch(records, params)
            mask = None
            if config.dropout_p > 0.0:
                rngs = [np.random.default_rng([config.seed, epoch, int(i)]) for i in idx]
                mask = dropout_masks(rngs, config.dropout_p, batch.gold_ids.shape[1:] + (params.dim,))
            per_story, correct, tokens = batch_forward(batch, params, mask, config.include_stop)
            loss = nx.tsum(per_story) * (1.0 / len(records))
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}; "
                                       f"last good checkpoint: {checkpoints[-1] if checkpoints else None}")
            for t in params.tensors.values():
                t.zero_grad()
            nx.backward(loss)
            grads = {n: (params[n].grad if params[n].grad is not None else np.zeros_like(arrays[n]))
                     for n in names}
            adam_step(arrays, grads, state, config.learning_rate, config.grad_clip_norm)
            total_loss += float(per_story.data.sum())
            total_weight += float(loss_weights(batch.masks, config.include_stop).sum())
            total_correct += correct
            total_tokens += tokens
        row = EpochLog(epoch, total_loss / max(total_weight, 1), total_correct / max(total_tokens, 1))
        rows.append(row)
        log.info("epoch %d loss %.5f acc %.4f", epoch, row.mean_loss, row.token_accuracy)
        checkpoint(epoch)
        if out is not None:
            write_loss_csv(out / "loss.csv", rows)
    if out is not None and not rows:
        write_loss_csv(out / "loss.csv", rows)
    for t in params.tensors.values():
        t.zero_grad()
    return TrainResult(params, rows, checkpoints)


def evaluate_teacher_forced(corpus: Sequence[StoryRecord], params: ModelParameters,
                            batch_size: int = 16, include_stop: bool = False) -> tuple[float, float]:
    """Mean per-position NLL and masked argmax accuracy without dropout."""
    loss, weight, correct, tokens = 0.0, 0.0, 0, 0
    with nx.no_grad():
        for start in range(0, len(corpus), batch_size):
            batch = make_batch(corpus[start:start + batch_size], params)
            per_story, c, n = batch_forward(batch, params, include_stop=include_stop)
            loss += float(per_story.data.sum())
            weight += float(loss_weights(batch.masks, include_stop).sum())
            correct += c
            tokens += n
    return loss / max(weight, 1), correct / max(tokens, 1)


# ----------------------------------------------------------------- gradcheck


def sampled_gradcheck(record: StoryRecord, params: ModelParameters, n_samples: int = 50,
                      seed: int = 0, h: float = 1e-5, include_stop: bool = True):
    """Compare backprop against central differences on sampled coordinates.

    Every parameter tensor contributes at least ``ceil(n_samples / #tensors)``
    coordinates; embedding-table samples are drawn from rows the story uses.
    Returns ``(max_relative_error, rows)`` with one
    ``(name, index, analytic, numeric, rel_err)`` row per sample.
    """
    rng = np.random.default_rng(seed)
    for t in params.tensors.values():
        t.zero_grad()
    nx.backward(story_loss(record, params, include_stop=include_stop))
    batch = make_batch([record], params)
    used_rows = {"word_table": np.unique(batch.gold_ids), "sentence_table": np.unique(batch.sentence_ids)}
    per_tensor = -(-n_samples // len(params.tensors))

    def f():
        with nx.no_grad():
            return story_loss(record, params, include_stop=include_stop).item()

    rows = []
    for name, t in params.tensors.items():
        grad = t.grad if t.grad is not None else np.zeros(t.shape)
        for _ in range(per_tensor):
            if name in used_rows:
                idx = (int(rng.choice(used_rows[name])), int(rng.integers(t.shape[1])))
            else:
                idx = tuple(int(rng.integers(n)) for n in t.shape)
            num = nx.numeric_grad(f, t.data, idx, h)
            ana = float(grad[idx])
            rows.append((name, idx, ana, num, nx.relative_error(ana, num)))
    for t in params.tensors.values():
        t.zero_grad()
    return max(r[4] for r in rows), rows


def gradcheck_setup(seed: int):
    """A tiny random model and one toy story for gradient checks."""
    from .dataio import make_toy_corpus
    toy = make_toy_corpus(seed, stories=1, vocab_size=12, topics=3, n_images=2, locations=3,
                          raw_dim=5, dim=8, max_len=4, min_words=2, max_words=3)
    record = toy.records(max_len=4)[0]
    params = ModelParameters.init(seed, 5, toy.word_table, toy.sentence_table)
    params = extend_sentence_table(params, [record])
    return record, params
