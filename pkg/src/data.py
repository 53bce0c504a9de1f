#!/usr/bin/env python3
"""
WAE-RNF - Corpus Data
Vocabulary, corpus loading, padded batching, a background prefetcher and two
synthetic datasets: a topic/template sentence grammar and the swiss roll.
"""

import logging
import os
import queue
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np

from rnf_utils import ContractError, DimensionError, VocabularyError

logger = logging.getLogger('data')

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ('<pad>', '<bos>', '<eos>', '<unk>')
MAX_SENTENCE_LEN = 200
DEFAULT_VOCAB_CAP = 20000
SPLITS = ('train', 'dev', 'test')


def tokenize(line: str) -> List[str]:
    """Lowercased whitespace tokens, truncated to the maximum sentence length."""
    return line.lower().split()[:MAX_SENTENCE_LEN]


@dataclass
class Vocab:
    """Dense token ↔ id map with PAD/BOS/EOS/UNK at ids 0-3."""
    tokens: List[str]
    index: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[:len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise VocabularyError(f"vocabulary must start with reserved tokens {RESERVED_TOKENS}")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.index.get(tok, UNK_ID) for tok in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"token id {i} outside [0, {len(self.tokens)})")
            out.append(self.tokens[i])
        return out

    def to_text(self, ids: Iterable[int]) -> str:
        """Join decoded tokens, dropping PAD/BOS/EOS."""
        return ' '.join(tok for tok in self.decode(ids) if tok not in RESERVED_TOKENS[:3])

    def save(self, path: str) -> None:
        tmp_path = path + '.tmp'
        with open(tmp_path, 'w', encoding='utf-8') as f:
            for i, tok in enumerate(self.tokens):
                f.write(f"{tok}\t{i}\n")
        os.replace(tmp_path, path)

    @classmethod
    def load(cls, path: str) -> 'Vocab':
        tokens = []
        with open(path, 'r', encoding='utf-8') as f:
            for lineno, line in enumerate(f):
                line = line.rstrip('\n')
                if not line:
                    continue
                tok, _, idx = line.rpartition('\t')
                if int(idx) != len(tokens):
                    raise VocabularyError(f"{path}:{lineno + 1}: ids must be dense, expected {len(tokens)}")
                tokens.append(tok)
        return cls(tokens)


def build_vocab(lines: Iterable[str], cap: int = DEFAULT_VOCAB_CAP) -> Vocab:
    """
    Rank tokens by frequency (ties broken lexicographically) and keep the top
    ``cap - 4`` next to the reserved tokens.
    """
    if cap <= len(RESERVED_TOKENS):
        raise ContractError(f"vocabulary cap must exceed {len(RESERVED_TOKENS)}, got {cap}")
    counts = Counter()
    seen_lines = 0
    for line in lines:
        seen_lines += 1
        counts.update(tok for tok in tokenize(line) if tok not in RESERVED_TOKENS)
    if not counts:
        raise ContractError(f"cannot build a vocabulary from an empty stream ({seen_lines} lines)")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[:cap - len(RESERVED_TOKENS)]]
    logger.info(f"Vocabulary: {len(counts)} distinct tokens, kept {len(kept)} (cap {cap})")
    return Vocab(list(RESERVED_TOKENS) + kept)


@dataclass
class Corpus:
    """One split of id sentences (EOS not stored)."""
    split: str
    sentences: List[np.ndarray]
    vocab: Vocab

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ContractError(f"split must be one of {SPLITS}, got '{self.split}'")
        self.sentences = [np.asarray(s, dtype=np.int64) for s in self.sentences]
        for s in self.sentences:
            if len(s) > MAX_SENTENCE_LEN:
                raise DimensionError(f"sentence of length {len(s)} exceeds {MAX_SENTENCE_LEN}")
            if len(s) and (s.min() < 0 or s.max() >= self.vocab.size):
                raise VocabularyError(f"sentence ids outside [0, {self.vocab.size})")

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def num_tokens(self) -> int:
        """Predicted tokens, one EOS per sentence included."""
        return int(sum(len(s) + 1 for s in self.sentences))

    def subset(self, count: int) -> 'Corpus':
        return Corpus(self.split, self.sentences[:count], self.vocab)


@dataclass
class Batch:
    """Padded targets (sentence + EOS), float mask, lengths and corpus positions."""
    ids: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def num_tokens(self) -> int:
        return int(self.lengths.sum())


def make_batch(sentences: Sequence[np.ndarray], index: Optional[Sequence[int]] = None,
               pad_to: Optional[int] = None) -> Batch:
    lengths = np.array([len(s) + 1 for s in sentences], dtype=np.int64)
    L = max(int(lengths.max()) if len(lengths) else 0, pad_to or 0)
    ids = np.full((len(sentences), L), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sentences), L))
    for row, s in enumerate(sentences):
        ids[row, :len(s)] = s
        ids[row, len(s)] = EOS_ID
        mask[row, :len(s) + 1] = 1.0
    index = np.arange(len(sentences)) if index is None else np.asarray(index, dtype=np.int64)
    return Batch(ids, mask, lengths, index)


def pass_order(n: int, seed: int, pass_index: int) -> np.ndarray:
    """Shuffled sentence order of one pass over the data."""
    return np.random.default_rng([seed, pass_index]).permutation(n)


def batcher(c: Corpus, batch_size: int, seed: int, pass_index: int = 0,
            start: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    """
    Yield the padded batches of one pass, beginning at batch ``start``.

    The order depends only on (seed, pass_index).
    """
    if batch_size < 1:
        raise ContractError(f"batch size must be positive, got {batch_size}")
    order = pass_order(len(c), seed, pass_index) if shuffle else np.arange(len(c))
    for lo in range(start * batch_size, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        yield make_batch([c.sentences[i] for i in idx], idx)


def num_batches(c: Corpus, batch_size: int) -> int:
    return (len(c) + batch_size - 1) // batch_size


_DONE = object()


def prefetch(iterator: Iterator, depth: int = 2) -> Iterator:
    """Run ``iterator`` on a background thread, handing items over a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=max(1, depth))
    stop = threading.Event()

    def worker():
        try:
            for item in iterator:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(_DONE)
        except Exception as exc:  # handed to the consumer
            q.put(exc)

    thread = threading.Thread(target=worker, name='batch-prefetch', daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()


def read_sentences(path: str) -> List[List[str]]:
    """One tokenized sentence per non-blank UTF-8 line."""
    with open(path, 'r', encoding='utf-8') as f:
        return [toks for toks in (tokenize(line) for line in f) if toks]


def load_corpus(path: str, vocab: Vocab, split: str) -> Corpus:
    sentences = [np.array(vocab.encode(toks), dtype=np.int64) for toks in read_sentences(path)]
    corpus = Corpus(split, sentences, vocab)
    logger.info(f"📂 Loaded {split} split: {len(corpus)} sentences, {corpus.num_tokens} tokens from {path}")
    return corpus


def load_splits(data_dir: str, vocab_cap: int = DEFAULT_VOCAB_CAP) -> Dict[str, Corpus]:
    """Read ``train.txt``/``dev.txt``/``test.txt``; the vocabulary comes from train."""
    train_path = os.path.join(data_dir, 'train.txt')
    with open(train_path, 'r', encoding='utf-8') as f:
        vocab = build_vocab(f, vocab_cap)
    splits = {}
    for split in SPLITS:
        path = os.path.join(data_dir, f"{split}.txt")
        if os.path.exists(path):
            splits[split] = load_corpus(path, vocab, split)
    return splits


# ---------------------------------------------------------------------------
# Synthetic topic grammar
# ---------------------------------------------------------------------------

TOPICS = {
    'animals': {'N': ('dog', 'cat', 'horse', 'bird'), 'V': ('chases', 'feeds', 'watches'),
                'A': ('small', 'wild')},
    'food': {'N': ('bread', 'soup', 'apple', 'cheese'), 'V': ('bakes', 'cooks', 'tastes'),
             'A': ('warm', 'fresh')},
    'travel': {'N': ('train', 'ship', 'road', 'city'), 'V': ('reaches', 'crosses', 'leaves'),
               'A': ('distant', 'busy')},
    'music': {'N': ('song', 'drum', 'piano', 'band'), 'V': ('plays', 'hears', 'tunes'),
              'A': ('loud', 'soft')},
}

TEMPLATES = (
    ('the', 'N', 'is', 'A'),
    ('the', 'N', 'V', 'the', 'N'),
    ('a', 'N', 'is', 'very', 'A'),
    ('the', 'A', 'N', 'V', 'a', 'N'),
    ('the', 'A', 'N', 'V', 'the', 'N', 'is', 'A'),
    ('a', 'N', 'V', 'the', 'A', 'N', 'and', 'the', 'N', 'V', 'a', 'N'),
)


def grammar_tokens() -> List[str]:
    words = []
    for template in TEMPLATES:
        words.extend(slot for slot in template if slot not in ('N', 'V', 'A'))
    for topic in TOPICS.values():
        for slot in ('N', 'V', 'A'):
            words.extend(topic[slot])
    return sorted(set(words))


def grammar_vocab() -> Vocab:
    return Vocab(list(RESERVED_TOKENS) + grammar_tokens())


def _generate(rng: np.random.Generator) -> List[str]:
    topic = TOPICS[list(TOPICS)[rng.integers(len(TOPICS))]]
    template = TEMPLATES[rng.integers(len(TEMPLATES))]
    return [topic[slot][rng.integers(len(topic[slot]))] if slot in topic else slot for slot in template]


def synthetic_grammar(n: int, seed: int, split: str = 'train') -> Corpus:
    """
    ``n`` sentences from the topic grammar: a topic and a template are drawn
    uniformly, then every slot picks a word of that topic uniformly.
    """
    vocab = grammar_vocab()
    rng = np.random.default_rng(seed)
    sentences = [np.array(vocab.encode(_generate(rng)), dtype=np.int64) for _ in range(n)]
    return Corpus(split, sentences, vocab)


def grammar_unigram_distribution() -> Dict[str, float]:
    """Limit word frequencies of the grammar (EOS excluded)."""
    expected = Counter()
    for template in TEMPLATES:
        for topic in TOPICS.values():
            for slot in template:
                if slot in topic:
                    for word in topic[slot]:
                        expected[word] += 1.0 / len(topic[slot])
                else:
                    expected[slot] += 1.0
    total = sum(expected.values())
    return {word: count / total for word, count in sorted(expected.items())}


def grammar_entropy() -> float:
    p = np.array(list(grammar_unigram_distribution().values()))
    return float(-(p * np.log(p)).sum())


def unigram_entropy(c: Corpus) -> float:
    counts = np.bincount(np.concatenate(c.sentences), minlength=c.vocab.size) if len(c) else np.zeros(1)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# Swiss roll
# ---------------------------------------------------------------------------

SWISS_T_RANGE = (1.5 * np.pi, 4.5 * np.pi)
SWISS_HEIGHT = 21.0


@dataclass
class SwissRoll:
    """Ambient points (n × 3) and intrinsic coordinates (t, h)."""
    points: np.ndarray
    intrinsic: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def swiss_roll(n: int, noise: float = 0.0, seed: int = 0) -> SwissRoll:
    rng = np.random.default_rng(seed)
    t = rng.uniform(*SWISS_T_RANGE, size=n)
    h = rng.uniform(0.0, SWISS_HEIGHT, size=n)
    points = np.stack([t * np.cos(t), h, t * np.sin(t)], axis=1)
    if noise > 0:
        points = points + noise * rng.standard_normal(points.shape)
    return SwissRoll(points, np.stack([t, h], axis=1))


def spiral_arc_length(t) -> np.ndarray:
    """Arc length of the spiral r = t from 0, ½ [t sqrt(1 + t²) + asinh t]."""
    t = np.asarray(t, dtype=np.float64)
    return 0.5 * (t * np.sqrt(1.0 + t * t) + np.arcsinh(t))


def swiss_roll_intrinsic_distance(a, b) -> np.ndarray:
    """Geodesic distance on the unrolled surface between intrinsic coordinates (t, h)."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    ds = spiral_arc_length(a[:, 0]) - spiral_arc_length(b[:, 0])
    return np.sqrt(ds ** 2 + (a[:, 1] - b[:, 1]) ** 2)
