"""Synthetic list-selection retrieval tasks and ordering permutation augmentation.

Each instance is a prompt plus K candidate documents of which exactly one is
relevant. Two flavors:

* ``key-match`` (link-prediction-like): the prompt carries one key token, the
  relevant candidate carries the same key, every distractor carries a
  different key.
* ``session-match`` (recommendation-like): the prompt repeats a feature token,
  the relevant candidate contains that feature, distractors carry other
  features.

Encoded layout::

    [BOS][TASK][P_s][SLOT_1][X_1] ... [SLOT_K][X_K][ANS][SLOT_c][EOS]
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, ANS, TASK_KEY, TASK_SESSION = range(6)
N_SPECIAL = 6

FLAVORS = ("key-match", "session-match")


@dataclass(frozen=True)
class TaskConfig:
    K: int = 10
    doc_len: int = 3
    query_len: int = 2
    flavor: str = "key-match"
    n_keys: int = 32
    n_features: int = 32
    n_filler: int = 64
    k_max: int | None = None
    seed: int = 0
    augment_copies: int | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.doc_len < 1:
            raise ValueError("doc_len must be >= 1")
        if self.query_len < 1:
            raise ValueError("query_len must be >= 1")
        if self.flavor not in FLAVORS:
            raise ValueError(f"unknown flavor {self.flavor!r}; expected one of {FLAVORS}")
        if self.k_max is not None and self.k_max < self.K:
            raise ValueError("k_max must be >= K")
        if min(self.n_keys, self.n_features, self.n_filler) < 1:
            raise ValueError("vocabulary partitions must be non-empty")

    @property
    def slot_capacity(self) -> int:
        return self.k_max or self.K

    @property
    def vocab(self) -> "Vocab":
        return Vocab(self.slot_capacity, self.n_keys, self.n_features, self.n_filler)

    @property
    def default_copies(self) -> int:
        """Permutation copies per instance: 5 for recommendation-like, 3 for link-prediction-like."""
        if self.augment_copies is not None:
            return self.augment_copies
        return 5 if self.flavor == "session-match" else 3

    @property
    def seq_len(self) -> int:
        return 1 + 1 + self.query_len + self.K * (1 + self.doc_len) + 3


@dataclass(frozen=True)
class Vocab:
    """Token id layout: specials, slot ids, then disjoint key/feature/filler ranges."""

    k_max: int
    n_keys: int
    n_features: int
    n_filler: int

    def slot_token(self, slot: int) -> int:
        if not 1 <= slot <= self.k_max:
            raise ValueError(f"slot {slot} outside reserved range 1..{self.k_max}")
        return N_SPECIAL + slot - 1

    def slot_of(self, token: int) -> int | None:
        s = token - N_SPECIAL + 1
        return s if 1 <= s <= self.k_max else None

    @property
    def key_start(self) -> int:
        return N_SPECIAL + self.k_max

    @property
    def feature_start(self) -> int:
        return self.key_start + self.n_keys

    @property
    def filler_start(self) -> int:
        return self.feature_start + self.n_features

    @property
    def size(self) -> int:
        return self.filler_start + self.n_filler

    def signal_range(self, flavor: str) -> range:
        if flavor == "key-match":
            return range(self.key_start, self.feature_start)
        return range(self.feature_start, self.filler_start)

    def filler_range(self) -> range:
        return range(self.filler_start, self.size)

    def word(self, token: int) -> str:
        """Readable rendering used by text prompts."""
        if token < N_SPECIAL:
            return ["<pad>", "<bos>", "<eos>", "<ans>", "<task:key>", "<task:session>"][token]
        if self.slot_of(token) is not None:
            return f"<slot{self.slot_of(token)}>"
        if token < self.feature_start:
            return f"key{token - self.key_start}"
        if token < self.filler_start:
            return f"feature{token - self.feature_start}"
        return f"w{token - self.filler_start}"


@dataclass(frozen=True)
class RetrievalInstance:
    prompt: tuple[int, ...]
    candidates: tuple[tuple[int, ...], ...]
    truth_slot: int | None
    provenance: str = ""

    @property
    def K(self) -> int:
        return len(self.candidates)

    def to_record(self) -> dict:
        return {
            "prompt": list(self.prompt),
            "candidates": [list(c) for c in self.candidates],
            "truth_slot": self.truth_slot,
            "provenance": self.provenance,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RetrievalInstance":
        return cls(
            prompt=tuple(rec["prompt"]),
            candidates=tuple(tuple(c) for c in rec["candidates"]),
            truth_slot=rec["truth_slot"],
            provenance=rec.get("provenance", ""),
        )


@dataclass(frozen=True)
class PermutationPlan:
    """``order[j]`` is the 0-based source index of the candidate placed at slot j+1."""

    order: tuple[int, ...]
    provenance: str = "identity"

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise ValueError(f"not a permutation: {self.order}")

    def apply(self, inst: RetrievalInstance) -> RetrievalInstance:
        if len(self.order) != inst.K:
            raise ValueError(f"permutation of size {len(self.order)} applied to K={inst.K}")
        cands = tuple(inst.candidates[i] for i in self.order)
        truth = None
        if inst.truth_slot is not None:
            truth = self.order.index(inst.truth_slot - 1) + 1
        prov = f"{inst.provenance}|{self.provenance}" if inst.provenance else self.provenance
        return RetrievalInstance(inst.prompt, cands, truth, prov)


def instance_seed(master: int, index: int) -> np.random.Generator:
    """Per-instance generator derived from (master seed, index); schedule-independent."""
    return np.random.default_rng(np.random.SeedSequence([master, index]))


def is_relevant(prompt: Sequence[int], candidate: Sequence[int], cfg: TaskConfig) -> bool:
    """Match predicate: the candidate shares a signal-partition token with the prompt."""
    sig = cfg.vocab.signal_range(cfg.flavor)
    wanted = {t for t in prompt if t in sig}
    return any(t in wanted for t in candidate)


def relevant_slots(inst: RetrievalInstance, cfg: TaskConfig) -> list[int]:
    return [i + 1 for i, c in enumerate(inst.candidates) if is_relevant(inst.prompt, c, cfg)]


def gen_instance(cfg: TaskConfig, truth_slot: int, seed) -> RetrievalInstance:
    """Build one instance with the relevant candidate at ``truth_slot`` (1-based)."""
    if not 1 <= truth_slot <= cfg.K:
        raise ValueError(f"truth_slot {truth_slot} outside 1..{cfg.K}")
    vocab = cfg.vocab
    sig = vocab.signal_range(cfg.flavor)
    if len(sig) < cfg.K:
        raise ValueError(
            f"signal partition has {len(sig)} tokens; need {cfg.K} distinct keys for K={cfg.K}"
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fill = vocab.filler_range()
    keys = rng.choice(len(sig), size=cfg.K, replace=False) + sig.start
    target = int(keys[0])
    others = [int(k) for k in keys[1:]]

    if cfg.flavor == "key-match":
        prompt = [int(t) for t in rng.integers(fill.start, fill.stop, size=cfg.query_len)]
        prompt[int(rng.integers(cfg.query_len))] = target
    else:
        prompt = [target] * cfg.query_len

    cands = []
    j = 0
    for slot in range(1, cfg.K + 1):
        key = target if slot == truth_slot else others[j]
        if slot != truth_slot:
            j += 1
        doc = [int(t) for t in rng.integers(fill.start, fill.stop, size=cfg.doc_len)]
        doc[int(rng.integers(cfg.doc_len))] = key
        cands.append(tuple(doc))
    return RetrievalInstance(tuple(prompt), tuple(cands), truth_slot, "source")


def gen_dataset(cfg: TaskConfig, slot_distribution: Sequence[float], n: int,
                seed: int) -> list[RetrievalInstance]:
    """Draw ``n`` instances with truth slots i.i.d. from ``slot_distribution``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    p = np.asarray(slot_distribution, dtype=np.float64)
    if p.shape != (cfg.K,):
        raise ValueError(f"slot distribution has {p.size} entries, K={cfg.K}")
    if (p < 0).any():
        raise ValueError("slot distribution has a negative probability")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"slot distribution sums to {p.sum()!r}, not 1")
    out = []
    for i in range(n):
        rng = instance_seed(seed, i)
        slot = int(rng.choice(cfg.K, p=p)) + 1
        out.append(gen_instance(cfg, slot, rng))
    return out


def gen_curriculum(cfg: TaskConfig, k_min: int, head: float, n: int,
                   seed: int) -> list[RetrievalInstance]:
    """Mixed candidate counts: instance ``i`` has ``k_min + i mod (K - k_min + 1)`` candidates.

    Every count uses the same vocabulary as ``cfg`` and puts ``head`` mass on
    slot 1. Short lists are learnable early and carry the skill over to the
    full ``K``.
    """
    if not 1 <= k_min <= cfg.K:
        raise ValueError(f"k_min must lie in 1..{cfg.K}")
    if n < 1:
        raise ValueError("n must be >= 1")
    span = cfg.K - k_min + 1
    configs = {K: with_k(cfg, K) for K in range(k_min, cfg.K + 1)}
    out = []
    for i in range(n):
        K = k_min + i % span
        rng = instance_seed(seed, i)
        slot = int(rng.choice(K, p=biased_distribution(K, head))) + 1
        out.append(gen_instance(configs[K], slot, rng))
    return out


def biased_distribution(K: int, head: float = 0.5) -> list[float]:
    """``head`` mass on slot 1, the rest spread uniformly."""
    if K == 1:
        return [1.0]
    rest = (1.0 - head) / (K - 1)
    return [head] + [rest] * (K - 1)


def uniform_distribution(K: int) -> list[float]:
    return [1.0 / K] * K


def cyclic_plans(K: int, m: int) -> list[PermutationPlan]:
    """Left rotations by 0..m-1."""
    return [
        PermutationPlan(tuple((j + r) % K for j in range(K)), f"cyclic:{r}")
        for r in range(m)
    ]


def random_plans(K: int, m: int, rng: np.random.Generator) -> list[PermutationPlan]:
    """``m`` distinct uniformly random permutations."""
    if m > math.factorial(K):
        raise ValueError(f"asked for {m} distinct permutations of {K} items (only {math.factorial(K)})")
    if m * 4 > math.factorial(K):
        pool = list(itertools.permutations(range(K)))
        picks = rng.choice(len(pool), size=m, replace=False)
        orders = [pool[int(i)] for i in picks]
    else:
        seen: set[tuple[int, ...]] = set()
        orders = []
        while len(orders) < m:
            o = tuple(int(v) for v in rng.permutation(K))
            if o not in seen:
                seen.add(o)
                orders.append(o)
    return [PermutationPlan(o, f"random:{i}") for i, o in enumerate(orders)]


def permute_augment(dataset: Sequence[RetrievalInstance], m: int, scheme: str = "cyclic",
                    seed: int = 0) -> list[RetrievalInstance]:
    """Replace every instance by ``m`` copies with reordered candidate lists."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if scheme not in ("cyclic", "random"):
        raise ValueError(f"unknown scheme {scheme!r}")
    out = []
    for idx, inst in enumerate(dataset):
        if scheme == "cyclic":
            plans = cyclic_plans(inst.K, m)
        else:
            plans = random_plans(inst.K, m, instance_seed(seed, idx))
        out.extend(p.apply(inst) for p in plans)
    return out


@dataclass(frozen=True)
class Encoded:
    tokens: np.ndarray
    target_index: int
    slot_offsets: tuple[int, ...]

    @property
    def answer_index(self) -> int:
        """Position whose next-token logits predict the answer (the ANS marker)."""
        return self.target_index - 1


def encode(inst: RetrievalInstance, cfg: TaskConfig, max_seq_len: int | None = None) -> Encoded:
    vocab = cfg.vocab
    task_tok = TASK_KEY if cfg.flavor == "key-match" else TASK_SESSION
    seq = [BOS, task_tok, *inst.prompt]
    offsets = []
    for i, doc in enumerate(inst.candidates, start=1):
        offsets.append(len(seq))
        seq.append(vocab.slot_token(i))
        seq.extend(doc)
    seq.append(ANS)
    target_index = len(seq)
    seq.append(vocab.slot_token(inst.truth_slot) if inst.truth_slot is not None else PAD)
    seq.append(EOS)
    if max_seq_len is not None and len(seq) > max_seq_len:
        raise ValueError(f"encoded length {len(seq)} exceeds max_seq_len {max_seq_len}")
    return Encoded(np.asarray(seq, dtype=np.int64), target_index, tuple(offsets))


def decode(tokens: Sequence[int], cfg: TaskConfig) -> RetrievalInstance:
    """Inverse of :func:`encode` for sequences produced from ``cfg``'s layout."""
    toks = [int(t) for t in tokens]
    vocab = cfg.vocab
    if toks[0] != BOS or toks[-1] != EOS:
        raise ValueError("sequence is not framed by BOS/EOS")
    pos = 2
    prompt = tuple(toks[pos:pos + cfg.query_len])
    pos += cfg.query_len
    cands = []
    for i in range(1, cfg.K + 1):
        if toks[pos] != vocab.slot_token(i):
            raise ValueError(f"expected slot marker {i} at position {pos}")
        cands.append(tuple(toks[pos + 1:pos + 1 + cfg.doc_len]))
        pos += 1 + cfg.doc_len
    if toks[pos] != ANS:
        raise ValueError(f"expected ANS at position {pos}")
    ans = toks[pos + 1]
    truth = None if ans == PAD else vocab.slot_of(ans)
    return RetrievalInstance(prompt, tuple(cands), truth, "")


def encode_batch(instances: Sequence[RetrievalInstance], cfg: TaskConfig,
                 max_seq_len: int | None = None) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    """Stack equal-length encodings: (tokens (B, L), target indices (B,), shared slot offsets)."""
    encs = [encode(x, cfg, max_seq_len) for x in instances]
    lengths = {len(e.tokens) for e in encs}
    if len(lengths) != 1:
        raise ValueError(f"instances encode to different lengths: {sorted(lengths)}")
    return (np.stack([e.tokens for e in encs]),
            np.asarray([e.target_index for e in encs]),
            encs[0].slot_offsets)


# dataset files: one JSON object per line, keys in this order:
# prompt, candidates, truth_slot, provenance
def save_dataset(path: str | Path, instances: Iterable[RetrievalInstance]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), separators=(",", ":")) + "\n")


def load_dataset(path: str | Path) -> list[RetrievalInstance]:
    with open(path, encoding="utf-8") as fh:
        return [RetrievalInstance.from_record(json.loads(line)) for line in fh if line.strip()]


def config_dict(cfg: TaskConfig) -> dict:
    return asdict(cfg)


def with_k(cfg: TaskConfig, K: int) -> TaskConfig:
    """Same vocabulary (slot capacity preserved), different candidate count."""
    return replace(cfg, K=K, k_max=cfg.slot_capacity)
