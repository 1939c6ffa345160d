"""Q&A language side: corpora, the A/A/B alternation schedule, a tiny
decoder-only language model conditioned on an instruction prefix, greedy
answering and slot-containment grading."""
from __future__ import annotations

import json
import math
import re
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import DEFECT_LABELS
from .encoders import LABEL_TEXT, Vocabulary
from .errors import ConfigError, DataError, InputError
from .modulation import PromptInstruction
from .objectives import cross_entropy
from .wafersynth import WaferSample, connected_regions

FACETS = ("presence", "category", "location", "quantity", "description", "analysis")
FACET_SLOT = {
    "presence": "presence",
    "category": "type",
    "location": "location",
    "quantity": "count",
    "description": "description",
    "analysis": "cause",
}
GRID_NAMES = (
    ("top-left", "top-center", "top-right"),
    ("middle-left", "center", "middle-right"),
    ("bottom-left", "bottom-center", "bottom-right"),
)
N_CORPUS_B = 100
_SLOT_RE = re.compile(r"\{(\w+)\}")


def data_path(name: str) -> Path:
    return Path(str(resources.files("waferqa") / "data" / name))


@dataclass(frozen=True)
class CorpusEntry:
    question_template: str
    answer_template: str
    corpus_tag: str  # "A" or "B"
    category: str  # defect label, or "general"
    facet: str

    def slots(self) -> set[str]:
        return set(_SLOT_RE.findall(self.question_template + " " + self.answer_template))


@dataclass
class Corpora:
    a: list[CorpusEntry]
    b: list[CorpusEntry]
    descriptions: dict[str, str]
    causes: dict[str, str]
    by_category: dict[str, list[CorpusEntry]] = field(default_factory=dict)

    def __post_init__(self):
        self.by_category = {c: [e for e in self.a if e.category == c] for c in DEFECT_LABELS}


def read_facts(path: str | Path) -> list[tuple[str, str]]:
    facts = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{n}: expected 'question<TAB>answer'")
        facts.append((parts[0].strip(), parts[1].strip()))
    return facts


def build_corpora(label_set: Sequence[str] = DEFECT_LABELS, cause_table: dict[str, str] | None = None,
                  general_facts_file: str | Path | None = None,
                  templates_file: str | Path | None = None) -> Corpora:
    templates = json.loads(Path(templates_file or data_path("templates_a.json")).read_text())
    if cause_table is None:
        cause_table = json.loads(data_path("cause_table.json").read_text())
    labels = [l for l in label_set if l != "good"]
    missing = [l for l in labels if l not in cause_table]
    if missing:
        raise ConfigError(f"cause table lacks entries for {missing}")
    corpus_a = [
        CorpusEntry(t["question"], t["answer"], "A", label, t["facet"])
        for label in labels
        for t in templates["templates"]
    ]
    facts = read_facts(general_facts_file or data_path("general_facts.txt"))
    if len(facts) < N_CORPUS_B:
        raise ConfigError(f"need at least {N_CORPUS_B} general facts, found {len(facts)}")
    corpus_b = [CorpusEntry(q, a, "B", "general", "general") for q, a in facts[:N_CORPUS_B]]
    return Corpora(corpus_a, corpus_b, dict(templates["descriptions"]), dict(cause_table))


def write_corpora(corpora: Corpora, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, entries in (("corpus_a.json", corpora.a), ("corpus_b.json", corpora.b)):
        rows = [e.__dict__ for e in entries]
        out.joinpath(name).write_text(json.dumps({"version": 1, "entries": rows}, indent=2) + "\n")


def load_heldout_general(path: str | Path | None = None) -> list[tuple[str, str]]:
    rows = []
    for line in Path(path or data_path("heldout_general.tsv")).read_text().splitlines():
        if line.strip():
            q, expected, _ = line.split("\t")
            rows.append((q, expected))
    return rows


def location_cell(mask: np.ndarray) -> str:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise InputError("empty mask has no location")
    h, w = mask.shape
    r = min(int(rows.mean() * 3 // h), 2)
    c = min(int(cols.mean() * 3 // w), 2)
    return GRID_NAMES[r][c]


def defect_count(mask: np.ndarray) -> int:
    return connected_regions(mask)[1]


def sample_slots(sample: WaferSample, corpora: Corpora) -> dict[str, str]:
    if sample.label == "good" or not sample.mask.any():
        raise InputError("slot values are only defined for defect samples")
    return {
        "type": LABEL_TEXT[sample.label],
        "location": location_cell(sample.mask),
        "count": str(defect_count(sample.mask)),
        "description": corpora.descriptions[sample.label],
        "cause": corpora.causes[sample.label],
    }


def fill_entry(entry: CorpusEntry, slots: dict[str, str] | None = None) -> tuple[str, str, dict[str, str]]:
    """(question, answer, expected grading slots)."""
    if entry.corpus_tag == "B":
        return entry.question_template, entry.answer_template, {"answer": entry.answer_template}
    slots = slots or {}
    fmt = {k: slots[k] for k in entry.slots()}
    answer = entry.answer_template.format(**fmt)
    key = FACET_SLOT[entry.facet]
    expected = {"presence": "yes"} if key == "presence" else {key: slots[key]}
    return entry.question_template.format(**fmt), answer, expected


def alternation_schedule(n_steps: int) -> list[str]:
    if n_steps < 1:
        raise InputError("schedule needs at least one step")
    return ["B" if i % 3 == 2 else "A" for i in range(n_steps)]


# -- grading -----------------------------------------------------------------

_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def normalize(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


def _contains(haystack: list[str], needle: list[str]) -> bool:
    if not needle:
        return True
    n = len(needle)
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def grade_answer(answer: str, expected: dict[str, str]) -> bool:
    """True when every expected slot value appears as a contiguous token run."""
    if not expected:
        raise InputError("grading needs at least one expected slot")
    words = normalize(answer)
    return all(_contains(words, normalize(str(v))) for v in expected.values())


# -- language model --------------------------------------------------------------

class _DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x, allowed):
        b, n, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        att = att.masked_fill(~allowed[:, None], float("-inf")).softmax(-1)
        x = x + self.proj((att @ v).transpose(1, 2).reshape(b, n, d))
        return x + self.mlp(self.ln2(x))


class ToyLM(nn.Module):
    """Word-level decoder; the instruction enters as a non-causal prefix and
    the output projection is tied to the token embedding table."""

    def __init__(self, vocab_size: int, dim: int = 64, layers: int = 2, heads: int = 4, max_len: int = 128):
        super().__init__()
        self.vocab_size, self.dim, self.max_len = vocab_size, dim, max_len
        self.tok = nn.Embedding(vocab_size, dim)
        self.pos = nn.Embedding(max_len, dim)
        nn.init.normal_(self.tok.weight, std=0.3)
        nn.init.normal_(self.pos.weight, std=0.1)
        self.blocks = nn.ModuleList([_DecoderBlock(dim, heads) for _ in range(layers)])
        self.ln = nn.LayerNorm(dim)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok(ids)

    def forward(self, prefix: torch.Tensor, answer_ids: torch.Tensor,
                prefix_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Logits (B, T, V) at the answer positions; position t predicts token t+1."""
        b, p, _ = prefix.shape
        t = answer_ids.shape[1]
        if p + t > self.max_len:
            raise InputError(f"sequence of {p + t} tokens exceeds max_len {self.max_len}")
        if answer_ids.numel() and (answer_ids.min() < 0 or answer_ids.max() >= self.vocab_size):
            raise InputError("answer token id outside the vocabulary")
        x = torch.cat([prefix, self.tok(answer_ids)], dim=1) + self.pos.weight[: p + t]
        n = p + t
        idx = torch.arange(n)
        allowed = (idx[None, :] <= idx[:, None]) | (idx[None, :] < p)
        allowed = allowed.expand(b, n, n)
        if prefix_mask is not None:
            key_ok = torch.cat([prefix_mask, torch.ones(b, t, dtype=torch.bool)], dim=1)
            allowed = allowed & key_ok[:, None, :]
        for blk in self.blocks:
            x = blk(x, allowed)
        h = self.ln(x[:, p:])
        return h @ self.tok.weight.t()


def answer_targets(answers: Sequence[Sequence[int]], vocab: Vocabulary, max_tokens: int):
    """Teacher-forcing inputs [BOS, a...] and targets [a..., EOS], padded."""
    t = min(max(len(a) for a in answers) + 1, max_tokens + 1)
    inputs = torch.full((len(answers), t), vocab.pad_id, dtype=torch.long)
    targets = torch.full((len(answers), t), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros(len(answers), t, dtype=torch.bool)
    for i, a in enumerate(answers):
        a = list(a)[:max_tokens]
        seq_in = [vocab.bos_id] + a
        seq_out = a + [vocab.eos_id]
        inputs[i, : len(seq_in)] = torch.tensor(seq_in)
        targets[i, : len(seq_out)] = torch.tensor(seq_out)
        mask[i, : len(seq_out)] = True
    return inputs, targets, mask


def sequence_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return cross_entropy(logits, targets, mask)


def lm_loss(instruction: PromptInstruction, answer_ids, lm: ToyLM, vocab: Vocabulary) -> torch.Tensor:
    """Teacher-forced next-token cross-entropy over the answer positions.

    ``answer_ids`` is one id sequence (ending with EOS) or a batch of them."""
    tokens = instruction.tokens
    batched = tokens.dim() == 3
    seqs = answer_ids if batched else [answer_ids]
    seqs = [list(map(int, s)) for s in seqs]
    for s in seqs:
        if not s or s[-1] != vocab.eos_id:
            raise InputError("answer must be non-empty and end with EOS")
        if any(not 0 <= i < len(vocab) for i in s):
            raise InputError("unknown token id in answer")
    n = max(len(s) for s in seqs)
    inputs = torch.full((len(seqs), n), vocab.pad_id, dtype=torch.long)
    targets = torch.full((len(seqs), n), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros(len(seqs), n, dtype=torch.bool)
    for i, s in enumerate(seqs):
        inputs[i, : len(s)] = torch.tensor([vocab.bos_id] + s[:-1])
        targets[i, : len(s)] = torch.tensor(s)
        mask[i, : len(s)] = True
    prefix = tokens if batched else tokens[None]
    key_mask = instruction.key_mask
    if key_mask is not None and not batched:
        key_mask = key_mask[None]
    logits = lm(prefix, inputs, key_mask)
    return sequence_loss(logits, targets, mask)


@torch.no_grad()
def generate_ids(instruction: PromptInstruction, lm: ToyLM, vocab: Vocabulary, max_len: int) -> list[list[int]]:
    tokens = instruction.tokens
    batched = tokens.dim() == 3
    prefix = tokens if batched else tokens[None]
    key_mask = instruction.key_mask
    if key_mask is not None and not batched:
        key_mask = key_mask[None]
    b = prefix.shape[0]
    seq = torch.full((b, 1), vocab.bos_id, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    out: list[list[int]] = [[] for _ in range(b)]
    for _ in range(max_len):
        logits = lm(prefix, seq, key_mask)[:, -1]
        nxt = logits.argmax(dim=-1)
        for i in range(b):
            if not done[i]:
                if int(nxt[i]) == vocab.eos_id:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
        if bool(done.all()):
            break
        seq = torch.cat([seq, nxt[:, None]], dim=1)
    return out


def answer(instruction: PromptInstruction, lm: ToyLM, vocab: Vocabulary, max_len: int = 32):
    """Greedy decoding until EOS or ``max_len``; a string (or list for batches)."""
    if max_len <= 0:
        return "" if instruction.tokens.dim() == 2 else [""] * instruction.tokens.shape[0]
    ids = generate_ids(instruction, lm, vocab, max_len)
    texts = [vocab.decode(s) for s in ids]
    return texts[0] if instruction.tokens.dim() == 2 else texts
