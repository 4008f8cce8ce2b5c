"""Prompt builders (zero-shot, few-shot, grouped instruction) and multi-pass grouped inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from .tasks import RetrievalInstance, TaskConfig, Vocab

FEW_SHOT_SETTINGS = (1, 3, 5)


@dataclass(frozen=True)
class Domain:
    task: str
    history_intro: str
    history_label: str
    candidate_intro: str
    candidate_label: str
    question: str
    item_noun: str


REC = Domain(
    task=("Task: You are given a shopper's purchase history. Choose the single item from the "
          "candidate list below that this shopper is most likely to buy next."),
    history_intro="Belows are {n} historical purchased products:",
    history_label="Bought Product",
    candidate_intro="Belows are {n} potential products to consider:",
    candidate_label="Potential Product",
    question=("Question: Which one potential product will the shopper buy next? "
              "Answer with its label."),
    item_noun="products",
)

LP = Domain(
    task=("Task: You are given a research paper. Choose the single paper from the candidate "
          "list below that it most likely cites."),
    history_intro="Source paper:",
    history_label="Paper",
    candidate_intro="The following are {n} potential papers for consideration:",
    candidate_label="Potential Paper",
    question=("Question: Which one potential paper does the source paper cite? Answer with its "
              "label, then give a one-sentence reason."),
    item_noun="papers",
)

DOMAINS = {"REC": REC, "LP": LP}


@dataclass(frozen=True)
class PromptInstance:
    """Text-level view of one selection problem."""

    candidates: tuple[str, ...]
    history: tuple[str, ...] = ()
    domain: str = "REC"
    answer: int | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")


@dataclass(frozen=True)
class Shot:
    """A solved example for few-shot prompts."""

    instance: PromptInstance
    answer: int


def _labelled(label: str, items: Sequence[str]) -> list[str]:
    return [f"{label} [{i}]({text})" for i, text in enumerate(items, start=1)]


def _history_block(meta: PromptInstance, dom: Domain) -> list[str]:
    if not meta.history:
        return []
    if dom is LP:
        return [dom.history_intro + " " + " ".join(meta.history), ""]
    return [dom.history_intro.format(n=len(meta.history)),
            *_labelled(dom.history_label, meta.history), ""]


def _body(meta: PromptInstance, dom: Domain) -> list[str]:
    return [
        *_history_block(meta, dom),
        dom.candidate_intro.format(n=len(meta.candidates)),
        *_labelled(dom.candidate_label, meta.candidates),
        dom.question,
    ]


def build_zero_shot(meta: PromptInstance) -> str:
    if not meta.candidates:
        raise ValueError("prompt needs at least one candidate")
    dom = DOMAINS[meta.domain]
    return "\n".join([dom.task, "", *_body(meta, dom)])


def build_few_shot(meta: PromptInstance, shots: Sequence[Shot]) -> str:
    if not meta.candidates:
        raise ValueError("prompt needs at least one candidate")
    if not shots:
        return build_zero_shot(meta)
    dom = DOMAINS[meta.domain]
    lines = [dom.task, "", f"Belows are {len(shots)} examples:"]
    for i, shot in enumerate(shots, start=1):
        if tuple(shot.instance.candidates) == tuple(meta.candidates):
            raise ValueError(f"shot {i} uses the evaluation instance's candidate set")
        ex = shot.instance
        parts = [*_history_block(ex, dom), *_labelled(dom.candidate_label, ex.candidates),
                 f"Answer: {dom.candidate_label} [{shot.answer}]"]
        lines.append(f"Example [{i}] " + "\n".join(parts))
    lines.append("")
    lines.extend(_body(meta, dom))
    return "\n".join(lines)


def group_ranges(K: int, G: int) -> list[tuple[int, int]]:
    """Contiguous 1-based label spans; sizes differ by at most one, larger groups first."""
    if not 1 <= G <= K:
        raise ValueError(f"group count {G} outside 1..{K}")
    base, extra = divmod(K, G)
    out = []
    start = 1
    for g in range(G):
        size = base + (1 if g < extra else 0)
        out.append((start, start + size - 1))
        start += size
    return out


def _span(r: tuple[int, int]) -> str:
    return f"([{r[0]}]-[{r[1]}])"


def build_hierarchical(meta: PromptInstance, G: int) -> str:
    """Single prompt instructing the model to pick per-group winners, then the final answer."""
    if not meta.candidates:
        raise ValueError("prompt needs at least one candidate")
    dom = DOMAINS[meta.domain]
    ranges = group_ranges(len(meta.candidates), G)
    noun = dom.item_noun
    if G == 1:
        steps = f"pick one from group {_span(ranges[0])}."
    else:
        listed = ", ".join(f"one from group {_span(r)}" for r in ranges[1:])
        steps = f"pick one from group {_span(ranges[0])}, then {listed}."
    instruction = (
        f"Work in two rounds. First split the {noun} into {G} groups of consecutive labels and "
        f"pick the strongest candidate inside each group; for example, {steps} Then compare "
        "those group winners and give the single best one as your answer."
    )
    return "\n".join([dom.task, "", instruction, "", *_body(meta, dom)])


def subinstance(inst: RetrievalInstance, members: Sequence[int]) -> RetrievalInstance:
    """Instance restricted to the given 1-based slots, relabelled 1..len(members)."""
    cands = tuple(inst.candidates[s - 1] for s in members)
    truth = None
    if inst.truth_slot is not None and inst.truth_slot in members:
        truth = list(members).index(inst.truth_slot) + 1
    return RetrievalInstance(inst.prompt, cands, truth, f"{inst.provenance}|sub")


class HierarchicalError(RuntimeError):
    pass


def hierarchical_infer(predictor: Callable[[RetrievalInstance], int | None],
                       inst: RetrievalInstance, G: int) -> int:
    """Two-pass grouped selection; returns a slot of the original instance."""
    ranges = group_ranges(inst.K, G)
    winners = []
    for g, (lo, hi) in enumerate(ranges, start=1):
        members = list(range(lo, hi + 1))
        sub = subinstance(inst, members)
        try:
            pick = predictor(sub)
        except Exception as e:
            raise HierarchicalError(f"group {g} {_span((lo, hi))}: predictor failed: {e}") from e
        if isinstance(pick, tuple):
            pick = pick[0]
        if pick is None or not 1 <= pick <= len(members):
            raise HierarchicalError(f"group {g} {_span((lo, hi))}: invalid pick {pick!r}")
        winners.append(members[pick - 1])
    if len(winners) == 1:
        return winners[0]
    final_inst = subinstance(inst, winners)
    try:
        pick = predictor(final_inst)
    except Exception as e:
        raise HierarchicalError(f"final pass over {winners}: predictor failed: {e}") from e
    if isinstance(pick, tuple):
        pick = pick[0]
    if pick is None or not 1 <= pick <= len(winners):
        raise HierarchicalError(f"final pass over {winners}: invalid pick {pick!r}")
    return winners[pick - 1]


def instance_text(inst: RetrievalInstance, task_cfg: TaskConfig,
                  domain: str | None = None) -> PromptInstance:
    """Render a synthetic token instance as a text prompt instance."""
    vocab: Vocab = task_cfg.vocab
    dom = domain or ("LP" if task_cfg.flavor == "key-match" else "REC")
    words = lambda toks: " ".join(vocab.word(t) for t in toks)  # noqa: E731
    if task_cfg.flavor == "session-match":
        history = tuple(vocab.word(t) for t in inst.prompt)
    else:
        history = (words(inst.prompt),)
    return PromptInstance(tuple(words(c) for c in inst.candidates), history, dom, inst.truth_slot)
