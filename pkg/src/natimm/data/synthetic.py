"""Synthetic multimodal corpora whose ground truth is recoverable from the grid.

Captioning: a 16x16 image holds up to four shapes, one per 8x8 quadrant. The
caption lists occupied quadrants in reading order as ``<quadrant> <color>
<shape>`` joined by ``and``; an all-blank grid is captioned ``empty``.

Reasoning: quadrants top_left, top_right, bottom_left are flooded with the
palette value of a small integer (1-9); the question names a 2-3 step
arithmetic chain over those integers. Targets read
``3 + 4 = 7 ; 7 * 2 = 14 ; answer 14``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from ..vocab import COLORS, QUADRANTS, SHAPES
from .samples import LANGUAGE, MULTIMODAL, PreferencePair, Sample, StepwiseSolution, SyntheticImage

IMAGE_SIZE = 16
QUAD = IMAGE_SIZE // 2
QUADRANT_ORIGINS = [(0, 0), (0, QUAD), (QUAD, 0), (QUAD, QUAD)]


def _shape_masks() -> dict[str, np.ndarray]:
    masks = {name: np.zeros((QUAD, QUAD), dtype=bool) for name in SHAPES}
    masks["square"][2:6, 2:6] = True
    masks["cross"][3:5, 1:7] = True
    masks["cross"][1:7, 3:5] = True
    masks["line"][3:5, :] = True
    masks["dot"][3:5, 3:5] = True
    return masks


SHAPE_MASKS = _shape_masks()


# -- captioning --------------------------------------------------------------

def draw_shapes(placements: list[tuple[int, int, str]]) -> SyntheticImage:
    """placements: (quadrant index, color value 1..6, shape name)."""
    grid = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.int64)
    for quadrant, color, shape in placements:
        r, c = QUADRANT_ORIGINS[quadrant]
        grid[r : r + QUAD, c : c + QUAD][SHAPE_MASKS[shape]] = color
    return SyntheticImage(grid)


def caption_from_grid(grid: np.ndarray) -> str:
    parts = []
    for name, (r, c) in zip(QUADRANTS, QUADRANT_ORIGINS):
        cell = grid[r : r + QUAD, c : c + QUAD]
        filled = cell != 0
        if not filled.any():
            continue
        colors = np.unique(cell[filled])
        if len(colors) != 1 or not 1 <= colors[0] <= len(COLORS):
            raise ValueError(f"quadrant {name} is not a single palette color")
        shape = next((s for s, m in SHAPE_MASKS.items() if np.array_equal(m, filled)), None)
        if shape is None:
            raise ValueError(f"quadrant {name} holds no known shape")
        parts.append(f"{name} {COLORS[colors[0] - 1]} {shape}")
    return " and ".join(parts) if parts else "empty"


CAPTION_PROMPT = "caption :"


def gen_caption_task(rng: np.random.Generator, n: int, max_shapes: int = 3) -> list[Sample]:
    samples = []
    for _ in range(n):
        k = int(rng.integers(1, max_shapes + 1))
        quadrants = sorted(rng.choice(4, size=k, replace=False).tolist())
        placements = [
            (q, int(rng.integers(1, len(COLORS) + 1)), SHAPES[int(rng.integers(len(SHAPES)))]) for q in quadrants
        ]
        image = draw_shapes(placements)
        samples.append(Sample(MULTIMODAL, CAPTION_PROMPT, caption_from_grid(image.grid), image, {"task": "caption"}))
    return samples


# -- text-only task ----------------------------------------------------------

def gen_reverse_task(rng: np.random.Generator, n: int, min_len: int = 3, max_len: int = 5) -> list[Sample]:
    """Language-only samples: ``reverse 3 1 4 :`` -> ``4 1 3``."""
    samples = []
    for _ in range(n):
        digits = rng.integers(0, 10, size=int(rng.integers(min_len, max_len + 1))).tolist()
        text = "reverse " + " ".join(map(str, digits)) + " :"
        target = " ".join(map(str, digits[::-1]))
        samples.append(Sample(LANGUAGE, text, target, None, {"task": "reverse"}))
    return samples


# -- arithmetic reasoning ------------------------------------------------------

# question -> (number of image integers, step recipe); a recipe step is
# (left operand, op, right operand) where "prev" is the running value,
# "n0".."n2" image integers, and digits literal constants.
TEMPLATES: dict[str, tuple[int, list[tuple[str, str, str]]]] = {
    "sum then double ?": (2, [("n0", "+", "n1"), ("prev", "*", "2")]),
    "sum then triple ?": (2, [("n0", "+", "n1"), ("prev", "*", "3")]),
    "product then add ?": (3, [("n0", "*", "n1"), ("prev", "+", "n2")]),
    "sum then subtract ?": (3, [("n0", "+", "n1"), ("prev", "-", "n2")]),
    "sum all then double ?": (3, [("n0", "+", "n1"), ("prev", "+", "n2"), ("prev", "*", "2")]),
}

_OPS = {"+": lambda a, b: a + b, "-": lambda a, b: a - b, "*": lambda a, b: a * b}
_STEP_RE = re.compile(r"^\s*(\d+)\s*([+\-*])\s*(\d+)\s*=\s*(\d+)\s*$")


@dataclass(frozen=True)
class ReasoningProblem:
    numbers: tuple[int, ...]
    question: str

    def gold_steps(self) -> list[tuple[int, str, int, int]]:
        _, recipe = TEMPLATES[self.question]
        steps = []
        prev = None
        for left, op, right in recipe:
            a = self._operand(left, prev)
            b = self._operand(right, prev)
            prev = _OPS[op](a, b)
            steps.append((a, op, b, prev))
        return steps

    def _operand(self, ref: str, prev: int | None) -> int:
        if ref == "prev":
            return prev
        if ref.startswith("n"):
            return self.numbers[int(ref[1:])]
        return int(ref)

    @property
    def answer(self) -> int:
        return self.gold_steps()[-1][3]

    def image(self) -> SyntheticImage:
        grid = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.int64)
        for value, (r, c) in zip(self.numbers, QUADRANT_ORIGINS):
            grid[r : r + QUAD, c : c + QUAD] = value
        return SyntheticImage(grid)

    @classmethod
    def from_image(cls, image: SyntheticImage, question: str) -> ReasoningProblem:
        if question not in TEMPLATES:
            raise ValueError(f"unknown question {question!r}")
        count, _ = TEMPLATES[question]
        numbers = []
        for r, c in QUADRANT_ORIGINS[:count]:
            numbers.append(int(image.grid[r, c]))
        return cls(tuple(numbers), question)


def format_step(step: tuple[int, str, int, int]) -> str:
    a, op, b, c = step
    return f"{a} {op} {b} = {c}"


def format_solution(steps: list[str], answer: int | str) -> str:
    return " ; ".join(list(steps) + [f"answer {answer}"])


def parse_solution(text: str) -> tuple[list[str], int | None]:
    """Split a generated target back into step strings and the final answer."""
    parts = [p.strip() for p in text.split(";")]
    answer = None
    if parts and parts[-1].startswith("answer"):
        m = re.fullmatch(r"answer\s+(\d+)", parts.pop())
        answer = int(m.group(1)) if m else None
    return [p for p in parts if p], answer


def parse_step(step: str) -> tuple[int, str, int, int] | None:
    m = _STEP_RE.match(step)
    if not m:
        return None
    return int(m.group(1)), m.group(2), int(m.group(3)), int(m.group(4))


def evaluate_steps(problem: ReasoningProblem, steps: list[str]) -> list[bool]:
    """A step is correct when it reproduces the gold step at the same index."""
    gold = problem.gold_steps()
    return [k < len(gold) and parse_step(s) == gold[k] for k, s in enumerate(steps)]


def _draw_problem(rng: np.random.Generator) -> ReasoningProblem:
    names = list(TEMPLATES)
    question = names[int(rng.integers(len(names)))]
    count, _ = TEMPLATES[question]
    numbers = [int(x) for x in rng.integers(1, 10, size=count)]
    if question == "sum then subtract ?":
        numbers[2] = int(rng.integers(1, min(9, numbers[0] + numbers[1]) + 1))
    return ReasoningProblem(tuple(numbers), question)


def reasoning_sample(problem: ReasoningProblem, index: int | None = None) -> Sample:
    gold = [format_step(s) for s in problem.gold_steps()]
    meta = {"task": "reasoning", "numbers": list(problem.numbers), "steps": gold, "answer": problem.answer}
    if index is not None:
        meta["question_id"] = index
    return Sample(MULTIMODAL, problem.question, format_solution(gold, problem.answer), problem.image(), meta)


def gen_reasoning_task(rng: np.random.Generator, n: int) -> list[Sample]:
    return [reasoning_sample(_draw_problem(rng), i) for i in range(n)]


def problem_of(sample: Sample) -> ReasoningProblem:
    return ReasoningProblem.from_image(sample.image, sample.text)


_OFFSETS = (-10, -3, -2, -1, 1, 2, 3, 10)


def _corrupt_result(value: int, rng: np.random.Generator) -> int:
    options = [value + o for o in _OFFSETS if 0 <= value + o <= 99]
    return options[int(rng.integers(len(options)))]


def noisy_solution(
    problem: ReasoningProblem,
    rng: np.random.Generator,
    error_rate: float,
    force_error: bool = False,
) -> StepwiseSolution:
    """Gold chain with each step's result independently corrupted at ``error_rate``.

    Later steps keep the gold operands, so labels are independent per step and
    the final answer is correct exactly when the last step is.
    """
    gold = problem.gold_steps()
    wrong = rng.random(len(gold)) < error_rate
    if force_error and not wrong.any():
        wrong[int(rng.integers(len(gold)))] = True
    steps = []
    for (a, op, b, c), bad in zip(gold, wrong):
        steps.append(format_step((a, op, b, _corrupt_result(c, rng) if bad else c)))
    answer = parse_step(steps[-1])[3]
    return StepwiseSolution(
        problem.question,
        steps,
        evaluate_steps(problem, steps),
        problem.image(),
        {"numbers": list(problem.numbers), "answer": answer},
    )


def gen_prm_corpus(rng: np.random.Generator, n: int, error_rate: float = 0.4) -> list[StepwiseSolution]:
    return [noisy_solution(_draw_problem(rng), rng, error_rate) for _ in range(n)]


def gen_candidates(problem: ReasoningProblem, rng: np.random.Generator, n: int, error_rate: float = 0.3) -> list[StepwiseSolution]:
    """Unlabeled candidate solutions for best-of-N selection."""
    out = []
    for _ in range(n):
        sol = noisy_solution(problem, rng, error_rate)
        out.append(StepwiseSolution(sol.question, sol.steps, None, sol.image, sol.meta))
    return out


def preference_pair(problem: ReasoningProblem, rng: np.random.Generator, error_rate: float = 0.3) -> PreferencePair:
    gold = [format_step(s) for s in problem.gold_steps()]
    bad = noisy_solution(problem, rng, error_rate, force_error=True)
    return PreferencePair(
        problem.question,
        format_solution(gold, problem.answer),
        format_solution(bad.steps, bad.meta["answer"]),
        problem.image(),
        {"numbers": list(problem.numbers), "answer": problem.answer},
    )


def gen_preference_pairs(rng: np.random.Generator, n: int) -> list[PreferencePair]:
    return [preference_pair(_draw_problem(rng), rng) for _ in range(n)]


def pairs_from_samples(samples: list[Sample], rng: np.random.Generator) -> list[PreferencePair]:
    """Preference pairs over the same questions as a reasoning corpus."""
    return [preference_pair(problem_of(s), rng) for s in samples]
