"""Hierarchical sentence/word decoder and its parameter set.

Shapes below use ``B`` for any leading batch dims, ``N`` images per story,
``M`` locations per image, ``D`` hidden size, ``V`` vocabulary size and
``L`` words per sentence.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import AttentionParams, attend, project_keys
from .dataio import NULL, EmbeddingTable
from .numerics import Tensor
from .recurrent import CellState, LstmParams, step

CKPT_MAGIC = b"CKPT1\n"


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    """Write named float64 arrays in CKPT1 layout (manifest, blank line, payload)."""
    lines = []
    for name, arr in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name {name!r} must be non-empty without whitespace")
        lines.append(" ".join([name] + [str(n) for n in np.shape(arr)]))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(("\n".join(lines) + "\n\n").encode("ascii") if lines else b"\n")
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic, expected CKPT1")
    pos = len(CKPT_MAGIC)
    manifest = []
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: manifest not terminated by a blank line")
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if not line:
            break
        name, *dims = line.split()
        try:
            manifest.append((name, tuple(int(d) for d in dims)))
        except ValueError:
            raise CheckpointError(f"{path}: bad manifest line {line!r}") from None
    out = {}
    for name, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(raw):
            raise CheckpointError(f"{path}: payload truncated in tensor {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


# ---------------------------------------------------------------- parameters


class ModelParameters:
    """Every learnable tensor of the decoder, by unique name.

    Token lists for the word and sentence tables travel alongside the
    tensors but are not stored in checkpoints; reload them from the
    embedding files.
    """

    def __init__(self, tensors: dict[str, Tensor], words: list[str], sentences: list[str] | None = None):
        self.tensors = tensors
        for name, t in tensors.items():
            t.name = name
            t.requires_grad = True
        self.words = list(words)
        self.word_index = {w: i for i, w in enumerate(self.words)}
        self.sentences = list(sentences or [])
        self.sentence_index = {s: i for i, s in enumerate(self.sentences)}
        self.null_id = self.word_index[NULL]
        self._check()

    def _check(self):
        D = self.dim
        expect = {
            "proj_raw": (self.raw_dim, D), "W_o_s": (D, D), "b_o_s": (D,),
            "W_o_t": (D, D), "b_o_t": (D,), "s0": (D,),
            "word_table": (len(self.words), D),
            "W_out": (D, len(self.words)), "b_out": (len(self.words),),
            "attn.W_h": (D, self.attn_dim), "attn.W_x": (D, self.attn_dim),
            "attn.w_score": (self.attn_dim,), "attn.b": (self.attn_dim,),
        }
        for layer in ("s_lstm", "w_lstm"):
            expect.update({f"{layer}.W_x": (D, 4 * D), f"{layer}.W_h": (D, 4 * D),
                           f"{layer}.W_z": (D, 4 * D), f"{layer}.b": (4 * D,)})
        if "sentence_table" in self.tensors:
            expect["sentence_table"] = (len(self.sentences), D)
        for name, shape in expect.items():
            if name not in self.tensors:
                raise CheckpointError(f"missing parameter {name!r}")
            if self.tensors[name].shape != shape:
                raise CheckpointError(f"parameter {name!r} has shape {self.tensors[name].shape}, expected {shape}")
        extra = set(self.tensors) - set(expect)
        if extra:
            raise CheckpointError(f"unexpected parameters {sorted(extra)}")

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __getattr__(self, name):
        tensors = self.__dict__.get("tensors")
        if tensors is not None and name in tensors:
            return tensors[name]
        raise AttributeError(name)

    @property
    def dim(self) -> int:
        return self.tensors["W_o_s"].shape[0]

    @property
    def raw_dim(self) -> int:
        return self.tensors["proj_raw"].shape[0]

    @property
    def attn_dim(self) -> int:
        return self.tensors["attn.w_score"].shape[0]

    @property
    def vocab_size(self) -> int:
        return len(self.words)

    @property
    def s_lstm(self) -> LstmParams:
        return self._lstm("s_lstm")

    @property
    def w_lstm(self) -> LstmParams:
        return self._lstm("w_lstm")

    def _lstm(self, p) -> LstmParams:
        t = self.tensors
        return LstmParams(t[f"{p}.W_x"], t[f"{p}.W_h"], t[f"{p}.W_z"], t[f"{p}.b"])

    @property
    def attn(self) -> AttentionParams:
        t = self.tensors
        return AttentionParams(t["attn.W_h"], t["attn.W_x"], t["attn.w_score"], t["attn.b"])

    def named(self):
        return list(self.tensors.items())

    def word_ids(self, tokens) -> np.ndarray:
        try:
            return np.array([self.word_index[w] for w in tokens], dtype=np.int64)
        except KeyError as e:
            raise KeyError(f"token {e.args[0]!r} outside the vocabulary") from None

    def word_table_view(self) -> EmbeddingTable:
        return EmbeddingTable(self.words, self.tensors["word_table"].data, trainable=True)

    def sentence_table_view(self) -> EmbeddingTable:
        return EmbeddingTable(self.sentences, self.tensors["sentence_table"].data, trainable=True)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def copy(self) -> "ModelParameters":
        return ModelParameters({n: Tensor(t.data.copy()) for n, t in self.tensors.items()},
                               self.words, self.sentences if "sentence_table" in self.tensors else None)

    def save(self, path):
        save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path, words: list[str], sentences: list[str] | None = None) -> "ModelParameters":
        arrays = load_checkpoint(path)
        if "sentence_table" in arrays:
            rows = arrays["sentence_table"].shape[0]
            if sentences is None or len(sentences) != rows:
                sentences = [f"<sentence {i}>" for i in range(rows)]
        return cls({n: Tensor(a) for n, a in arrays.items()}, words, sentences)

    @classmethod
    def init(cls, seed: int, raw_dim: int, word_table: EmbeddingTable,
             sentence_table: EmbeddingTable | None = None, attn_dim: int | None = None,
             forget_bias: float = 1.0) -> "ModelParameters":
        """Fresh parameters: weights uniform in +-1/sqrt(D), forget-gate bias ``forget_bias``.

        The hidden size ``D`` is the word-embedding dimension.
        """
        D = word_table.dim
        if NULL not in word_table:
            raise ValueError(f"word table lacks the {NULL} token")
        if sentence_table is not None and sentence_table.dim != D:
            raise ValueError(f"sentence table dim {sentence_table.dim} != word dim {D}")
        A = attn_dim or max(1, D // 2)
        V = len(word_table)
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(D)

        def u(*shape):
            return Tensor(rng.uniform(-bound, bound, size=shape))

        t = {
            "proj_raw": Tensor(rng.uniform(-1, 1, size=(raw_dim, D)) / np.sqrt(raw_dim)),
            "W_o_s": u(D, D), "b_o_s": u(D),
            "W_o_t": u(D, D), "b_o_t": u(D),
        }
        for prefix in ("s_lstm", "w_lstm"):
            lp = LstmParams.init(rng, D, D, prefix, forget_bias)
            t.update({f"{prefix}.W_x": lp.W_x, f"{prefix}.W_h": lp.W_h,
                      f"{prefix}.W_z": lp.W_z, f"{prefix}.b": lp.b})
        ap = AttentionParams.init(rng, D, A)
        t.update({"attn.W_h": ap.W_h, "attn.W_x": ap.W_x, "attn.w_score": ap.w_score, "attn.b": ap.b})
        t["s0"] = u(D)
        t["W_out"] = u(D, V)
        t["b_out"] = Tensor(np.zeros(V))
        t["word_table"] = Tensor(word_table.vectors.copy())
        sentences = None
        if sentence_table is not None:
            t["sentence_table"] = Tensor(sentence_table.vectors.copy())
            sentences = sentence_table.tokens
        return cls(t, word_table.tokens, sentences)


# ------------------------------------------------------------------- forward


@dataclass
class VisualBundle:
    full_story: Tensor     # (B, D) mean over all N*M projected locations
    per_image: Tensor      # (B, N, M, D)
    image_vectors: Tensor  # (B, N, D) mean over locations of each image


def project_features(grids, params: ModelParameters) -> VisualBundle:
    """Project raw grids ``(..., N, M, D_raw)`` into the hidden space."""
    grids = nx.tensor(grids)
    if grids.ndim < 3 or grids.shape[-1] != params.raw_dim:
        raise nx.ShapeError(f"feature grids {grids.shape} do not match proj_raw {params.proj_raw.shape}")
    per_image = nx.matmul(grids, params.proj_raw)
    image_vectors = nx.mean(per_image, axis=-2)
    full_story = nx.mean(image_vectors, axis=-2)
    return VisualBundle(full_story, per_image, image_vectors)


def sentence_start(bundle: VisualBundle, params: ModelParameters) -> CellState:
    """Initial sentence-layer state followed by the start step.

    ``h0 = W_o_s^T mean(x) + b``, ``c0 = 0``; the start step feeds the learned
    ``s0`` with the full-story vector in the visual slot.
    """
    h0 = nx.matmul(bundle.full_story, params.W_o_s) + params.b_o_s
    c0 = Tensor(np.zeros(h0.shape))
    return step(params.s0, bundle.full_story, CellState(h0, c0), params.s_lstm)


def sentence_step(prev_sentence, image_vector, state: CellState, params: ModelParameters) -> CellState:
    return step(prev_sentence, image_vector, state, params.s_lstm)


def sentence_pass(bundle: VisualBundle, sentence_vectors, params: ModelParameters) -> list[CellState]:
    """Run the sentence layer for N+1 steps and return the N per-sentence states.

    State ``t`` consumes the vector of sentence ``t-1`` (``s0`` for the first
    sentence) and image ``t``; ``sentence_vectors[..., N-1, :]`` is accepted
    for shape symmetry but never read.
    """
    sentence_vectors = nx.tensor(sentence_vectors)
    n = bundle.image_vectors.shape[-2]
    if sentence_vectors.ndim < 2 or sentence_vectors.shape[-2] != n:
        raise ValueError(f"expected {n} sentence vectors, got shape {sentence_vectors.shape}")
    state = sentence_start(bundle, params)
    states = []
    for t in range(n):
        prev = params.s0 if t == 0 else sentence_vectors[..., t - 1, :]
        state = sentence_step(prev, bundle.image_vectors[..., t, :], state, params)
        states.append(state)
    return states


@dataclass
class WordContext:
    """Per-image quantities reused at every word step."""

    locations: Tensor  # (B, M, D)
    keys: Tensor       # (B, M, A)


def word_start(per_image_t, params: ModelParameters) -> tuple[CellState, WordContext]:
    per_image_t = nx.tensor(per_image_t)
    h0 = nx.matmul(nx.mean(per_image_t, axis=-2), params.W_o_t) + params.b_o_t
    c0 = Tensor(np.zeros(h0.shape))
    return CellState(h0, c0), WordContext(per_image_t, project_keys(per_image_t, params.attn))


def word_step(v, state: CellState, ctx: WordContext, params: ModelParameters):
    """One word-layer step: attend with the previous hidden state, then update.

    Returns ``(new_state, alpha)``.
    """
    alpha, z = attend(state.h, ctx.locations, params.attn, keys=ctx.keys)
    return step(v, z, state, params.w_lstm), alpha


def output_logits(h, params: ModelParameters) -> Tensor:
    return nx.matmul(h, params.W_out) + params.b_out


def word_logits(h_s_t, per_image_t, gold_ids, params: ModelParameters,
                dropout_mask: np.ndarray | None = None, return_alphas: bool = False):
    """Teacher-forced logits ``(..., L, V)`` for one sentence.

    Step 1 consumes the sentence-layer output ``h_s_t``; step ``k > 1``
    consumes the word vector of gold token ``k-1``.  ``gold_ids`` has shape
    ``(..., L)``; ``dropout_mask`` (already scaled) multiplies the stacked
    hidden states ``(..., L, D)`` before the output head.
    """
    gold_ids = np.asarray(gold_ids, dtype=np.int64)
    L = gold_ids.shape[-1]
    if L < 1:
        raise ValueError("need at least one word position")
    if gold_ids.size and (gold_ids.min() < 0 or gold_ids.max() >= params.vocab_size):
        raise KeyError("token id outside the vocabulary")
    state, ctx = word_start(per_image_t, params)
    hs, alphas = [], []
    for k in range(L):
        v = h_s_t if k == 0 else nx.take_rows(params.word_table, gold_ids[..., k - 1])
        state, alpha = word_step(v, state, ctx, params)
        hs.append(state.h)
        alphas.append(alpha)
    H = nx.stack(hs, axis=-2)
    if dropout_mask is not None:
        H = H * dropout_mask
    logits = output_logits(H, params)
    return (logits, alphas) if return_alphas else logits


def story_logits(features, sentence_vectors, gold_ids, params: ModelParameters,
                 dropout_mask: np.ndarray | None = None) -> list[Tensor]:
    """Teacher-forced logits for every sentence of (a batch of) stories.

    ``features`` is ``(..., N, M, D_raw)``, ``sentence_vectors`` ``(..., N, D)``
    and ``gold_ids`` ``(..., N, L)``.  Returns N tensors of shape ``(..., L, V)``.
    """
    gold_ids = np.asarray(gold_ids, dtype=np.int64)
    bundle = project_features(features, params)
    states = sentence_pass(bundle, sentence_vectors, params)
    out = []
    for t, st in enumerate(states):
        mask_t = None if dropout_mask is None else dropout_mask[..., t, :, :]
        out.append(word_logits(st.h, bundle.per_image[..., t, :, :], gold_ids[..., t, :],
                               params, mask_t))
    return out


def load_params(ckpt, word_emb, sent_emb=None) -> ModelParameters:
    """Checkpoint plus the token lists from the embedding files it was trained with."""
    from .dataio import load_embeddings
    words = load_embeddings(word_emb).tokens
    sentences = load_embeddings(sent_emb).tokens if sent_emb else None
    return ModelParameters.load(Path(ckpt), words, sentences)
