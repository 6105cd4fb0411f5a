"""Task-file parsing, vocabularies, and padded bag-of-words encoding.

The file format is the line-numbered QA layout: every line starts with an
integer id and the id resetting to 1 opens a fresh context. Question lines
carry tab-separated question text, answer token, and optionally the ids of
supporting fact lines. One Story is emitted per question, holding every
fact line seen so far in its context.
"""

from __future__ import annotations

import glob
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import EncodingError, ParseError

__all__ = [
    "Story",
    "Vocabulary",
    "EncodedStory",
    "Encoder",
    "tokenize",
    "parse_babi_file",
    "render_babi",
    "build_vocab",
    "position_weights",
    "load_task",
    "split_train_val",
    "max_sentence_len",
]

NIL_ID = 0

VARIANT_DIRS = {
    "en-1k": "en",
    "en-10k": "en-10k",
    "hn-1k": "hn",
    "hn-10k": "hn-10k",
    "shuffled-1k": "shuffled",
    "shuffled-10k": "shuffled-10k",
}

DEFAULT_PATTERN = "qa{task}_*_{split}.txt"


@dataclass
class Story:
    """One QA example: facts in order, a question, a one-token answer."""

    facts: list
    question: list
    answer: str
    supporting: list = field(default_factory=list)


def tokenize(text):
    """Lowercase, split on whitespace, strip trailing '.' and '?'."""
    out = []
    for tok in text.lower().split():
        tok = tok.rstrip(".?")
        if tok:
            out.append(tok)
    return out


def parse_babi_file(stream):
    """Parse an open text stream (or iterable of lines) into Stories."""
    stories = []
    facts = []  # token lists of the current context
    line_to_fact = {}  # file line id -> index into facts
    for line_no, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        head, _, rest = line.partition(" ")
        try:
            line_id = int(head)
        except ValueError:
            raise ParseError(f"expected integer line id, got {head!r}", line_no)
        if not rest:
            raise ParseError("line has no content", line_no)
        if line_id == 1:
            facts = []
            line_to_fact = {}
        if "\t" in rest:
            parts = rest.split("\t")
            if len(parts) < 2:
                raise ParseError("question line missing answer", line_no)
            question = tokenize(parts[0])
            answer_tokens = tokenize(parts[1])
            if len(answer_tokens) != 1:
                raise ParseError(
                    f"answer must be a single token, got {parts[1]!r}", line_no
                )
            supporting = []
            if len(parts) >= 3 and parts[2].strip():
                for s in parts[2].split():
                    try:
                        sid = int(s)
                    except ValueError:
                        raise ParseError(f"bad supporting id {s!r}", line_no)
                    if sid not in line_to_fact:
                        raise ParseError(
                            f"supporting id {sid} does not name a fact line", line_no
                        )
                    supporting.append(line_to_fact[sid])
            stories.append(
                Story(
                    facts=[list(f) for f in facts],
                    question=question,
                    answer=answer_tokens[0],
                    supporting=supporting,
                )
            )
        else:
            tokens = tokenize(rest)
            if not tokens:
                raise ParseError("empty fact line", line_no)
            line_to_fact[line_id] = len(facts)
            facts.append(tokens)
    return stories


def render_babi(stories):
    """Render stories back to the line format, one context per story."""
    lines = []
    for story in stories:
        for i, fact in enumerate(story.facts, start=1):
            lines.append(f"{i} {' '.join(fact)} .")
        q = f"{len(story.facts) + 1} {' '.join(story.question)} ?\t{story.answer}"
        if story.supporting:
            q += "\t" + " ".join(str(i + 1) for i in story.supporting)
        lines.append(q)
    return "\n".join(lines) + "\n"


class Vocabulary:
    """Bijective token <-> id map with the nil id 0 reserved for padding."""

    def __init__(self, tokens=()):
        self._token_to_id = {}
        self.id_to_token = ["<nil>"]
        for tok in tokens:
            self.add(tok)

    def add(self, token):
        if token not in self._token_to_id:
            self._token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)
        return self._token_to_id[token]

    def id(self, token):
        try:
            return self._token_to_id[token]
        except KeyError:
            raise EncodingError(f"token {token!r} not in vocabulary")

    def __contains__(self, token):
        return token in self._token_to_id

    def token(self, idx):
        return self.id_to_token[idx]

    @property
    def size(self):
        return len(self.id_to_token)

    def tokens(self):
        """Non-nil tokens in id order."""
        return list(self.id_to_token[1:])


def build_vocab(stories):
    """Vocabulary over every token in the stories, ids by first occurrence."""
    vocab = Vocabulary()
    for story in stories:
        for fact in story.facts:
            for tok in fact:
                vocab.add(tok)
        for tok in story.question:
            vocab.add(tok)
        vocab.add(story.answer)
    return vocab


def max_sentence_len(stories):
    """Longest fact or question, in tokens, over the given stories."""
    longest = 1
    for story in stories:
        for fact in story.facts:
            longest = max(longest, len(fact))
        longest = max(longest, len(story.question))
    return longest


def position_weights(n_words, dim):
    """Word-position weighting matrix, (n_words, dim):

    l[j, k] = (1 - j/J) - (k/d) (1 - 2 j/J), with j, k counted from 1.
    """
    if n_words < 1 or dim < 1:
        raise ValueError("n_words and dim must be >= 1")
    j = np.arange(1, n_words + 1)[:, None] / float(n_words)
    k = np.arange(1, dim + 1)[None, :] / float(dim)
    return (1.0 - j) - k * (1.0 - 2.0 * j)


@dataclass
class EncodedStory:
    """Integer-encoded story: (M, J) memory, (J,) question, answer id."""

    memory: np.ndarray
    n_facts: int
    question: np.ndarray
    answer_id: int
    position_weights: np.ndarray


class Encoder:
    """Turns Stories into fixed-shape EncodedStories.

    ``max_words`` is the padded sentence width J (computed per task over
    train+test), ``memory_size`` the slot count M. When a story holds more
    facts than slots, the most recent M facts are kept.
    """

    def __init__(self, vocab, max_words, memory_size, delta):
        self.vocab = vocab
        self.max_words = int(max_words)
        self.memory_size = int(memory_size)
        self.delta = int(delta)
        self.pos_weights = position_weights(self.max_words, self.delta)

    def _encode_sentence(self, tokens, out):
        if len(tokens) > self.max_words:
            raise EncodingError(
                f"sentence of {len(tokens)} tokens exceeds width {self.max_words}"
            )
        for j, tok in enumerate(tokens):
            out[j] = self.vocab.id(tok)

    def encode(self, story: Story) -> EncodedStory:
        facts = story.facts[-self.memory_size :]
        memory = np.zeros((self.memory_size, self.max_words), dtype=np.int64)
        for i, fact in enumerate(facts):
            self._encode_sentence(fact, memory[i])
        question = np.zeros(self.max_words, dtype=np.int64)
        self._encode_sentence(story.question, question)
        return EncodedStory(
            memory=memory,
            n_facts=len(facts),
            question=question,
            answer_id=self.vocab.id(story.answer),
            position_weights=self.pos_weights,
        )

    def encode_all(self, stories):
        return [self.encode(s) for s in stories]


def load_task(root, task, variant="en-1k", split="train", pattern=DEFAULT_PATTERN):
    """Load one task's stories from a dataset directory tree.

    Files are located as ``root/<variant dir>/<pattern>`` with ``{task}`` and
    ``{split}`` substituted; the pattern may contain glob wildcards to absorb
    the task-name portion of the file names.
    """
    if not 1 <= int(task) <= 20:
        raise ValueError(f"task id must be 1..20, got {task}")
    if variant not in VARIANT_DIRS:
        raise ValueError(f"unknown variant {variant!r}, expected {sorted(VARIANT_DIRS)}")
    rel = pattern.format(task=task, split=split)
    full = os.path.join(root, VARIANT_DIRS[variant], rel)
    matches = sorted(glob.glob(full))
    if not matches:
        raise FileNotFoundError(f"no task file matching {full}")
    with open(matches[0], encoding="utf-8") as fh:
        return parse_babi_file(fh)


def split_train_val(stories, seed):
    """Seeded 90/10 split; train gets floor(0.9 n), validation the rest."""
    n = len(stories)
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(0.9 * n)
    train = [stories[i] for i in order[:n_train]]
    val = [stories[i] for i in order[n_train:]]
    return train, val
