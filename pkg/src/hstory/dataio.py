"""Corpus, feature-grid and embedding files, plus the toy-corpus generator.

File formats
------------
corpus (``.jsonl``)
    one JSON object per line:
    ``{"story_id": str, "feature_file": str, "sentences": [[str, ...], ...]}``
FEAT1
    ``FEAT1\\n``, then ``"N M D_raw\\n"``, then ``N*M*D_raw`` little-endian
    float32 values, image-major.
EMB1
    ``EMB1\\n``, then ``"count dim\\n"``; per entry a little-endian uint16
    byte length, the UTF-8 token, ``dim`` little-endian float32 values.

Float32 payloads are widened to float64 on load and narrowed on write, so
``write(load(f))`` reproduces ``f`` byte for byte.
"""
from __future__ import annotations

import json
import logging
import os
import string
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .prng import SplitMix64

log = logging.getLogger(__name__)

NULL = "<NULL>"
SOS = "<SOS>"
RESERVED = (NULL, SOS)

FEAT_MAGIC = b"FEAT1\n"
EMB_MAGIC = b"EMB1\n"

_PUNCT = str.maketrans("", "", string.punctuation)


class FormatError(ValueError):
    """A file does not conform to its declared format."""


@dataclass
class EmbeddingTable:
    tokens: list[str]
    vectors: np.ndarray
    trainable: bool = True
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.tokens):
            raise ValueError(
                f"{len(self.tokens)} tokens but vectors have shape {self.vectors.shape}")
        self._index = {}
        for i, tok in enumerate(self.tokens):
            if tok in self._index:
                raise ValueError(f"duplicate token {tok!r}")
            self._index[tok] = i

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def index(self, token: str) -> int:
        return self._index[token]

    def get(self, token: str, default=None):
        return self._index.get(token, default)

    def vector(self, token: str) -> np.ndarray:
        return self.vectors[self._index[token]]


@dataclass
class StoryRecord:
    """One story: N feature grids and N padded sentences with their masks.

    ``features`` has shape ``(N, M, D_raw)``; ``sentences[i]`` has exactly
    ``L`` tokens (``<NULL>``-padded) and ``masks[i, k]`` is 1 for a real word.
    """

    story_id: str
    feature_file: str
    features: np.ndarray | None
    sentences: list[list[str]]
    masks: np.ndarray

    @property
    def n_images(self) -> int:
        return len(self.sentences)

    def words(self, i: int) -> list[str]:
        """Real (unmasked) words of sentence ``i``."""
        return [w for w, m in zip(self.sentences[i], self.masks[i]) if m]


# ------------------------------------------------------------------ features


def write_features(path, grids: np.ndarray):
    grids = np.asarray(grids)
    if grids.ndim != 3:
        raise ValueError(f"feature grids must be (N, M, D_raw), got {grids.shape}")
    n, m, d = grids.shape
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(f"{n} {m} {d}\n".encode("ascii"))
        fh.write(grids.astype("<f4").tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(FEAT_MAGIC):
        raise FormatError(f"{path}: bad magic, expected FEAT1")
    end = raw.find(b"\n", len(FEAT_MAGIC))
    if end < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        n, m, d = (int(x) for x in raw[len(FEAT_MAGIC):end].split())
    except ValueError:
        raise FormatError(f"{path}: header must be 'N M D_raw'") from None
    payload = raw[end + 1:]
    want = 4 * n * m * d
    if len(payload) != want:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header implies {want}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, m, d)
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: non-finite feature values")
    return values


# ---------------------------------------------------------------- embeddings


def write_embeddings(path, table: EmbeddingTable):
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(f"{len(table)} {table.dim}\n".encode("ascii"))
        for tok, vec in zip(table.tokens, table.vectors):
            b = tok.encode("utf-8")
            fh.write(struct.pack("<H", len(b)))
            fh.write(b)
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def load_embeddings(path, trainable: bool = True) -> EmbeddingTable:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(EMB_MAGIC):
        raise FormatError(f"{path}: bad magic, expected EMB1")
    pos = raw.find(b"\n", len(EMB_MAGIC))
    if pos < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        count, dim = (int(x) for x in raw[len(EMB_MAGIC):pos].split())
    except ValueError:
        raise FormatError(f"{path}: header must be 'count dim'") from None
    pos += 1
    tokens, vectors, seen = [], np.empty((count, dim)), set()
    for i in range(count):
        if pos + 2 > len(raw):
            raise FormatError(f"{path}: truncated at entry {i} (byte {pos})")
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        stop = pos + n + 4 * dim
        if stop > len(raw):
            raise FormatError(f"{path}: truncated at entry {i} (byte {pos})")
        tok = raw[pos:pos + n].decode("utf-8")
        if tok in seen:
            raise FormatError(f"{path}: duplicate token {tok!r} at entry {i}")
        seen.add(tok)
        tokens.append(tok)
        vectors[i] = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos + n)
        pos = stop
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after {count} entries")
    if not np.all(np.isfinite(vectors)):
        raise FormatError(f"{path}: non-finite embedding values")
    return EmbeddingTable(tokens, vectors, trainable=trainable)


# -------------------------------------------------------------------- corpus


def clean_sentence(tokens) -> list[str]:
    """Strip punctuation characters from every token and drop emptied ones."""
    out = []
    for tok in tokens:
        tok = tok if tok in RESERVED else str(tok).translate(_PUNCT)
        if tok:
            out.append(tok)
    return out


def pad_sentence(words: list[str], max_len: int, vocab=None) -> tuple[list[str], np.ndarray]:
    """Pad to ``max_len`` with <NULL>; unknown words become <NULL> with mask 0."""
    tokens, mask = [], np.zeros(max_len, dtype=np.int64)
    for k, w in enumerate(words):
        if w == NULL or (vocab is not None and w not in vocab):
            tokens.append(NULL)
        else:
            tokens.append(w)
            mask[k] = 1
    tokens.extend([NULL] * (max_len - len(tokens)))
    return tokens, mask


def load_corpus(path, features_dir=None, max_len: int = 15, vocab=None,
                n_images: int | None = None, with_features: bool = True) -> list[StoryRecord]:
    """Read a JSONL corpus and the feature file each record points to.

    Stories with a sentence longer than ``max_len`` (after punctuation
    stripping) are skipped.  ``vocab`` is anything supporting ``in``; when
    given, out-of-vocabulary words are replaced by <NULL> and masked out.
    ``features_dir`` defaults to the corpus file's directory.  With
    ``with_features=False`` the grids are not read and ``features`` is None.
    """
    path = Path(path)
    features_dir = Path(features_dir) if features_dir is not None else path.parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{where}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict) or not {"story_id", "feature_file", "sentences"} <= obj.keys():
                raise FormatError(f"{where}: record needs story_id, feature_file, sentences")
            sents = obj["sentences"]
            if not isinstance(sents, list) or not all(isinstance(s, list) for s in sents):
                raise FormatError(f"{where}: sentences must be a list of token lists")
            if n_images is not None and len(sents) != n_images:
                raise FormatError(f"{where}: {len(sents)} sentences, expected {n_images}")
            cleaned = [clean_sentence(s) for s in sents]
            too_long = [len(s) for s in cleaned if len(s) > max_len]
            if too_long:
                log.warning("%s: skipping story %s, sentence of %d words exceeds %d",
                            where, obj["story_id"], too_long[0], max_len)
                continue
            feats = None
            if with_features:
                feat_path = features_dir / obj["feature_file"]
                try:
                    feats = load_features(feat_path)
                except OSError as e:
                    raise FormatError(f"{where}: cannot read feature file ({e})") from None
            if feats is not None and feats.shape[0] != len(cleaned):
                raise FormatError(
                    f"{where}: {len(cleaned)} sentences but {feat_path} holds {feats.shape[0]} images")
            padded = [pad_sentence(s, max_len, vocab) for s in cleaned]
            records.append(StoryRecord(
                story_id=str(obj["story_id"]),
                feature_file=obj["feature_file"],
                features=feats,
                sentences=[p[0] for p in padded],
                masks=np.stack([p[1] for p in padded]) if padded else np.zeros((0, max_len), np.int64),
            ))
    return records


def write_corpus(path, records):
    """Write records back as JSONL (real words only; features are not rewritten)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"story_id": rec.story_id, "feature_file": rec.feature_file,
                   "sentences": [rec.words(i) for i in range(rec.n_images)]}
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def sentence_vector_of(tokens, word_table: EmbeddingTable) -> np.ndarray:
    """Mean word vector of the real (non-<NULL>) tokens."""
    real = [t for t in tokens if t != NULL]
    if not real:
        raise ValueError("sentence has no real tokens")
    missing = [t for t in real if t not in word_table]
    if missing:
        raise KeyError(f"token {missing[0]!r} not in word table")
    return np.mean([word_table.vector(t) for t in real], axis=0)


# ----------------------------------------------------------------- toy data


@dataclass
class ToyPaths:
    corpus: Path
    features_dir: Path
    word_emb: Path
    sent_emb: Path


@dataclass
class ToyCorpus:
    """In-memory result of :func:`make_toy_corpus`."""

    story_ids: list[str]
    topics: np.ndarray              # (stories, N) topic of each image
    features: np.ndarray            # (stories, N, M, D_raw)
    sentences: list[list[list[str]]]
    word_table: EmbeddingTable
    sentence_table: EmbeddingTable
    topic_sentences: list[list[str]]

    def records(self, max_len: int = 15) -> list[StoryRecord]:
        """The stories as padded records, without touching the filesystem."""
        out = []
        for sid, feats, sents in zip(self.story_ids, self.features, self.sentences):
            padded = [pad_sentence(s, max_len) for s in sents]
            out.append(StoryRecord(sid, f"{sid}.feat", feats, [p[0] for p in padded],
                                   np.stack([p[1] for p in padded])))
        return out


def make_toy_corpus(seed: int, stories: int, vocab_size: int = 60, topics: int = 8,
                    n_images: int = 5, locations: int = 9, raw_dim: int = 32,
                    dim: int = 64, max_len: int = 15, min_words: int = 3,
                    max_words: int = 8, noise: float = 0.1) -> ToyCorpus:
    """Synthesise a learnable corpus standing in for dataset + pretrained encoders.

    Each topic owns one fixed sentence whose first word is unique to it, and a
    random ``(M, D_raw)`` prototype grid.  Image ``t`` of a story gets a random
    topic; its grid is the prototype plus Gaussian noise and its sentence is
    the topic sentence.  Word vectors are random unit vectors; sentence
    vectors are the mean of their word vectors.
    """
    if stories < 0 or topics < 1 or n_images < 1 or locations < 1 or raw_dim < 1 or dim < 1:
        raise ValueError("stories must be >= 0 and every size >= 1")
    if vocab_size < topics + len(RESERVED):
        raise ValueError(f"vocab_size {vocab_size} < topics {topics} + {len(RESERVED)} reserved")
    max_words = min(max_words, max_len)
    if not 1 <= min_words <= max_words:
        raise ValueError(f"need 1 <= min_words <= max_words, got {min_words}, {max_words}")
    rng = SplitMix64(seed)
    n_content = vocab_size - len(RESERVED)
    words = [f"w{i:03d}" for i in range(n_content)]

    topic_sentences = []
    lengths = min_words + rng.integers(max_words - min_words + 1, topics)
    for t in range(topics):
        rest = rng.integers(n_content, int(lengths[t]) - 1)
        topic_sentences.append([words[t]] + [words[j] for j in rest])

    protos = rng.normal(topics * locations * raw_dim).reshape(topics, locations, raw_dim)
    story_topics = rng.integers(topics, stories * n_images).reshape(stories, n_images)
    noise_vals = rng.normal(stories * n_images * locations * raw_dim)
    feats = protos[story_topics] + noise * noise_vals.reshape(stories, n_images, locations, raw_dim)
    # stored as float32 on disk; keep the in-memory copy identical to a reload
    feats = feats.astype(np.float32).astype(np.float64)

    vecs = rng.normal(vocab_size * dim).reshape(vocab_size, dim)
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    vecs = vecs.astype(np.float32).astype(np.float64)
    word_table = EmbeddingTable(list(RESERVED) + words, vecs)

    sent_tokens = [" ".join(s) for s in topic_sentences]
    sent_vecs = np.stack([sentence_vector_of(s, word_table) for s in topic_sentences])
    sent_vecs = sent_vecs.astype(np.float32).astype(np.float64)
    # distinct topics may draw the same sentence; keep the first
    uniq = {}
    for tok, v in zip(sent_tokens, sent_vecs):
        uniq.setdefault(tok, v)
    sentence_table = EmbeddingTable(list(uniq), np.array(list(uniq.values())).reshape(len(uniq), dim))

    return ToyCorpus(
        story_ids=[f"toy{seed}_{i:05d}" for i in range(stories)],
        topics=story_topics,
        features=feats,
        sentences=[[list(topic_sentences[t]) for t in row] for row in story_topics],
        word_table=word_table,
        sentence_table=sentence_table,
        topic_sentences=topic_sentences,
    )


def gen_toy_corpus(out_dir, seed: int, stories: int, vocab_size: int = 60, topics: int = 8,
                   **kwargs) -> ToyPaths:
    """Write a toy corpus under ``out_dir``; see :func:`make_toy_corpus`."""
    toy = make_toy_corpus(seed, stories, vocab_size, topics, **kwargs)
    out = Path(out_dir)
    feat_dir = out / "features"
    os.makedirs(feat_dir, exist_ok=True)
    paths = ToyPaths(out / "corpus.jsonl", feat_dir, out / "words.emb", out / "sentences.emb")
    with open(paths.corpus, "w", encoding="utf-8") as fh:
        for sid, feats, sents in zip(toy.story_ids, toy.features, toy.sentences):
            fname = f"{sid}.feat"
            write_features(feat_dir / fname, feats)
            # relative to the corpus file, so no --features-dir is needed
            fh.write(json.dumps({"story_id": sid, "feature_file": f"features/{fname}",
                                 "sentences": sents}) + "\n")
    write_embeddings(paths.word_emb, toy.word_table)
    write_embeddings(paths.sent_emb, toy.sentence_table)
    return paths
