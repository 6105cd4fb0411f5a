"""The number-guessing dialog game: dataset generation, the scripted
teacher's play loop, and the three evaluation metrics.

A game state is an exclusive integer interval (lo, hi) around the hidden
target. Each past round renders as two facts, "guess <n>" and "target is
smaller|larger", so generated datasets parse with the regular task-file
machinery. Training labels follow the midpoint policy, the unique
deterministic always-in-bounds answer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Story, Vocabulary
from . import model as mdl

__all__ = [
    "GameConfig",
    "Dialog",
    "EpisodeRecord",
    "GameMetrics",
    "vocabulary",
    "generate_dataset",
    "midpoint_label",
    "play_episode",
    "evaluate",
    "binary_search_policy",
    "constant_policy",
    "net_policy",
    "render_transcript",
    "QUESTION",
]

SMALLER = "smaller"
LARGER = "larger"
CORRECT = "correct"

QUESTION = ["what", "is", "your", "guess"]


@dataclass
class GameConfig:
    min: int = 0
    max: int = 10
    max_tries: int = 100
    n_train: int = 1000

    def __post_init__(self):
        if self.min >= self.max:
            raise ValueError("min must be below max")
        if self.max_tries < 1:
            raise ValueError("max_tries must be >= 1")

    @property
    def lo0(self):
        """Initial exclusive lower bound."""
        return self.min - 1

    @property
    def hi0(self):
        """Initial exclusive upper bound."""
        return self.max + 1


@dataclass
class Dialog:
    """Rounds of (guess, hint) plus the exclusive bounds they imply."""

    target: int
    lo: int
    hi: int
    rounds: list = field(default_factory=list)

    def hint_for(self, guess):
        if guess == self.target:
            return CORRECT
        return SMALLER if self.target < guess else LARGER

    def record(self, guess):
        """Apply one guess: returns the hint and tightens the bounds.

        Bounds only move toward the target, so hi never increases and lo
        never decreases regardless of how wild the guess is.
        """
        hint = self.hint_for(guess)
        if hint == SMALLER:
            self.hi = min(self.hi, guess)
        elif hint == LARGER:
            self.lo = max(self.lo, guess)
        self.rounds.append((guess, hint))
        return hint

    def facts(self):
        out = []
        for guess, hint in self.rounds:
            out.append(["guess", str(guess)])
            if hint != CORRECT:
                out.append(["target", "is", hint])
        return out


def midpoint_label(lo, hi):
    """Deterministic in-bounds answer: floor of the interval midpoint."""
    if hi - lo < 2:
        raise ValueError(f"no integer strictly inside ({lo}, {hi})")
    label = (lo + hi) // 2
    if not lo < label < hi:  # only possible at hi - lo == 2
        label = lo + 1
    return label


def vocabulary(cfg: GameConfig) -> Vocabulary:
    """Canonical game vocabulary: every number in range plus the fixed words.

    Built programmatically so rarely-guessed numbers are still answerable.
    """
    tokens = [str(n) for n in range(cfg.min, cfg.max + 1)]
    tokens += ["guess", "nothing", "target", "is", SMALLER, LARGER] + QUESTION
    vocab = Vocabulary()
    for tok in tokens:
        vocab.add(tok)
    return vocab


def generate_dataset(cfg: GameConfig, rng) -> list:
    """Training stories: a partial dialog played by a random in-bounds
    guesser, a "what is your guess" question, and the midpoint label."""
    stories = []
    max_history = max(2, int(math.ceil(math.log2(cfg.max - cfg.min + 2))) + 1)
    for _ in range(cfg.n_train):
        target = int(rng.integers(cfg.min, cfg.max + 1))
        dialog = Dialog(target=target, lo=cfg.lo0, hi=cfg.hi0)
        n_rounds = int(rng.integers(0, max_history + 1))
        for _ in range(n_rounds):
            candidates = [
                g for g in range(dialog.lo + 1, dialog.hi) if g != target
            ]
            if not candidates:
                break
            dialog.record(candidates[int(rng.integers(len(candidates)))])
        label = midpoint_label(dialog.lo, dialog.hi)
        stories.append(
            Story(
                facts=dialog.facts() or [["guess", "nothing"]],
                question=list(QUESTION),
                answer=str(label),
            )
        )
    return stories


def _empty_history_story():
    return Story(
        facts=[["guess", "nothing"]], question=list(QUESTION), answer="0"
    )


def binary_search_policy(facts, lo, hi):
    """The perfect student: always the midpoint of the current bounds."""
    return midpoint_label(lo, hi)


def constant_policy(value):
    def policy(facts, lo, hi):
        return value

    return policy


def net_policy(net, encoder, n_samples, rng):
    """Wrap a trained network as a game policy.

    The dialog so far becomes a story (with the same placeholder fact the
    training data uses for an empty history); a non-numeric prediction is
    returned as None and scored as an out-of-bounds decision.
    """

    def policy(facts, lo, hi):
        story = Story(
            facts=[list(f) for f in facts] or [["guess", "nothing"]],
            question=list(QUESTION),
            answer="0",
        )
        enc = encoder.encode(story)
        answer_id, _, _ = mdl.predict(net, enc, n_samples=n_samples, rng=rng)
        token = encoder.vocab.token(answer_id)
        try:
            return int(token)
        except ValueError:
            return None

    return policy


@dataclass
class EpisodeRecord:
    target: int
    guesses: list
    hints: list
    in_bounds: list
    solved: bool

    @property
    def rounds(self):
        return len(self.guesses)

    @property
    def accuracy(self):
        if not self.guesses:
            return 0.0
        return sum(self.in_bounds) / len(self.guesses)


def play_episode(player, cfg: GameConfig, target, rng=None, n_samples=1, encoder=None):
    """Run one game against the scripted teacher.

    ``player`` is either a policy callable (facts, lo, hi) -> guess or a
    trained network (then ``encoder`` is required and ``n_samples`` controls
    prediction averaging). A guess is a correct decision when it lies
    strictly inside the bounds implied by the hints so far. The game stops
    on a correct guess or after max_tries rounds.
    """
    if isinstance(player, mdl.MemN2N):
        if encoder is None:
            raise ValueError("a network player needs an encoder")
        player = net_policy(player, encoder, n_samples, rng)
    if not cfg.min <= target <= cfg.max:
        raise ValueError(f"target {target} outside [{cfg.min}, {cfg.max}]")
    dialog = Dialog(target=target, lo=cfg.lo0, hi=cfg.hi0)
    guesses, hints, in_bounds = [], [], []
    solved = False
    for _ in range(cfg.max_tries):
        guess = player(dialog.facts(), dialog.lo, dialog.hi)
        if guess is None:
            guesses.append(None)
            hints.append(None)
            in_bounds.append(False)
            continue
        in_bounds.append(dialog.lo < guess < dialog.hi)
        hint = dialog.record(guess)
        guesses.append(guess)
        hints.append(hint)
        if hint == CORRECT:
            solved = True
            break
    return EpisodeRecord(
        target=target,
        guesses=guesses,
        hints=hints,
        in_bounds=in_bounds,
        solved=solved,
    )


@dataclass
class GameMetrics:
    accuracy: float  # percent of in-bounds decisions, averaged over games
    success: float  # percent of games solved within max_tries
    rounds: float  # mean rounds over successful games


def evaluate(player, cfg: GameConfig, n_games=100, rng=None, n_samples=1, encoder=None):
    """The three game metrics over n_games; targets are sampled without
    replacement while the range allows, uniformly otherwise."""
    if rng is None:
        rng = np.random.default_rng(0)
    n_values = cfg.max - cfg.min + 1
    if n_games <= n_values:
        targets = rng.choice(n_values, size=n_games, replace=False) + cfg.min
    else:
        targets = rng.integers(cfg.min, cfg.max + 1, size=n_games)
    records = [
        play_episode(player, cfg, int(t), rng=rng, n_samples=n_samples, encoder=encoder)
        for t in targets
    ]
    accuracy = 100.0 * float(np.mean([r.accuracy for r in records]))
    success = 100.0 * float(np.mean([r.solved for r in records]))
    solved = [r.rounds for r in records if r.solved]
    rounds = float(np.mean(solved)) if solved else math.nan
    return GameMetrics(accuracy=accuracy, success=success, rounds=rounds), records


def render_transcript(record: EpisodeRecord, cfg: GameConfig, model_name="model"):
    """Episode transcript in the dialog-log style."""
    bar = "-" * 31
    lines = [
        bar,
        f"Model: {model_name}",
        f"min: {cfg.min}",
        f"max: {cfg.max}",
        bar,
        "**** TESTING MODEL STARTS ****",
        bar,
        f"Select a number between {cfg.min} and {cfg.max}",
    ]
    dialog = Dialog(target=record.target, lo=cfg.lo0, hi=cfg.hi0)
    correct_so_far = 0
    for i, guess in enumerate(record.guesses):
        lines.append(f"Round: {i + 1}")
        lines.append("-" * 13)
        if guess is None:
            lines.append("Selection: (not a number)")
            lines.append("Wrong: Selection Out of Bounds!")
            lines.append(f"Accuracy: = {correct_so_far / (i + 1):.2f}")
            continue
        lines.append(f"Selection: {guess}")
        if record.in_bounds[i]:
            correct_so_far += 1
            lines.append("Correct: Selection within Bounds!")
        else:
            lines.append("Wrong: Selection Out of Bounds!")
        lines.append(f"Accuracy: = {correct_so_far / (i + 1):.2f}")
        lines.append(f"min_num: {dialog.lo}")
        lines.append(f"max_num: {dialog.hi}")
        hint = dialog.record(guess)
        if hint == CORRECT:
            lines.append("*" * 49)
            lines.append(f"Congratulations, the target is {record.target}")
            lines.append(f"You found the correct answer after {i + 1} rounds")
            lines.append(f"Accuracy: {record.accuracy:.2f}")
        else:
            lines.append(f"Hint: Target is a {hint} number")
    if not record.solved:
        lines.append("*" * 49)
        lines.append(f"Out of tries, the target was {record.target}")
        lines.append(f"Accuracy: {record.accuracy:.2f}")
    return "\n".join(lines)
