"""Tokenizer, vocabulary, JSONL corpus I/O, and the synthetic corpus generator.

The synthetic corpus stands in for a real summarization dataset at desk scale.
Each document is a handful of templated "fact" sentences interleaved with
distractor sentences; the gold summary renders the leading facts, each one
either copied verbatim or rewritten through a fixed synonym/reordering
template with probability ``paraphrase_rate``. The paraphrase knob controls
how abstractive gold summaries are, which is the property the distillation
experiments need to vary.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .rng import derive_rng

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"
UNK_TOKEN = "<unk>"
RESERVED_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files (bad JSON line, missing key)."""


class Vocabulary:
    """Bijective token string <-> integer id map with four reserved ids."""

    def __init__(self, tokens: Sequence[str]):
        seen: dict[str, int] = {}
        for tok in tokens:
            if tok in RESERVED_TOKENS:
                raise ValueError(f"token {tok!r} collides with a reserved token")
            if tok in seen:
                raise ValueError(f"duplicate token {tok!r} in vocabulary")
            seen[tok] = len(RESERVED_TOKENS) + len(seen)
        self._token_to_id = seen
        self._tokens = list(RESERVED_TOKENS) + list(tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise ValueError(f"token id {token_id} out of range for vocabulary of size {len(self._tokens)}")
        return self._tokens[token_id]

    def to_token_list(self) -> list[str]:
        """Full token list including the reserved prefix; index == id."""
        return list(self._tokens)

    @classmethod
    def from_token_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError("token list does not start with the reserved tokens")
        return cls(tokens[len(RESERVED_TOKENS):])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_token_list(), ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_token_list(json.loads(Path(path).read_text(encoding="utf-8")))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Lowercase, split on whitespace, map unknown words to the unknown id."""
    return [vocab.id_of(word) for word in text.lower().split()]


def detokenize(token_ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.token_of(i) for i in token_ids)


@dataclass(frozen=True)
class RawExample:
    """One (document, summary) pair at the text level, as stored on disk."""

    id: str
    document: str
    summary: str


@dataclass(frozen=True)
class CorpusExample:
    """One tokenized (document, gold summary) pair."""

    id: str
    document: list[int]
    gold: list[int]


def save_corpus(examples: Iterable[RawExample], path: str | Path) -> None:
    """Write examples as UTF-8 JSONL with LF line endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            record = {"id": ex.id, "document": ex.document, "summary": ex.summary}
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_corpus(path: str | Path) -> list[RawExample]:
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("id", "document", "summary"):
                if key not in record:
                    raise CorpusFormatError(f"{path}: line {lineno}: missing key {key!r}")
            examples.append(
                RawExample(id=str(record["id"]), document=record["document"], summary=record["summary"])
            )
    return examples


def encode_corpus(
    raw: Iterable[RawExample],
    vocab: Vocabulary,
    max_document_tokens: int | None = None,
) -> list[CorpusExample]:
    """Tokenize raw examples; documents are truncated to ``max_document_tokens``."""
    encoded = []
    for ex in raw:
        document = tokenize(ex.document, vocab)
        gold = tokenize(ex.summary, vocab)
        if max_document_tokens is not None:
            document = document[:max_document_tokens]
        if not document or not gold:
            raise CorpusFormatError(f"example {ex.id!r} has an empty document or summary")
        encoded.append(CorpusExample(id=ex.id, document=document, gold=gold))
    return encoded


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Synthetic corpus generator
# ---------------------------------------------------------------------------

# Words that appear in documents only.
_AGENTS = [
    "mayor", "farmer", "artist", "banker", "teacher", "doctor", "pilot", "chef",
    "lawyer", "dancer", "singer", "guard", "judge", "miner", "sailor", "tailor",
    "barber", "clerk", "coach", "actor", "poet", "nurse", "monk", "scout",
    "baker", "hunter", "weaver", "smith", "driver", "porter", "warden", "bishop",
    "colonel", "senator", "sheriff", "scholar", "trader", "broker", "captain",
    "curator", "editor", "student", "tourist", "soldier", "painter", "plumber",
    "printer", "ranger", "skipper", "surgeon", "swimmer", "tinker", "vendor",
    "waiter", "botanist", "chemist", "dentist", "diver", "falconer", "gardener",
]

_ACTIONS = [
    "visited", "repaired", "painted", "inspected", "opened", "closed", "cleaned",
    "measured", "photographed", "surveyed", "decorated", "restored", "guarded",
    "toured", "mapped", "sketched", "praised", "examined", "unlocked", "sealed",
    "crossed", "avoided", "admired", "studied", "circled", "approached",
    "leased", "purchased", "sold", "rented", "auctioned", "appraised",
    "demolished", "rebuilt", "fenced", "lit", "flooded", "drained", "expanded",
    "reopened",
]

_OBJECTS = [
    "bridge", "statue", "market", "garden", "tunnel", "harbor", "castle",
    "library", "museum", "theater", "bakery", "factory", "stadium", "fountain",
    "granary", "lighthouse", "mill", "orchard", "palace", "pier", "plaza",
    "quarry", "reservoir", "school", "tower", "warehouse", "windmill", "chapel",
    "aqueduct", "barn", "canal", "courtyard", "cottage", "dam", "depot", "dock",
    "forge", "fort", "gallery", "gate", "hall", "hangar", "inn", "jetty",
    "kiln", "lodge", "mansion", "monument", "observatory", "pavilion",
    "prison", "tavern", "refinery", "shrine", "silo", "terminal", "vineyard",
    "workshop", "yard", "arena",
]

_PLACES = [
    "river", "valley", "hill", "forest", "meadow", "lake", "cliff", "desert",
    "island", "marsh", "mountain", "plain", "pond", "ridge", "shore", "swamp",
    "trail", "creek", "canyon", "dune", "glacier", "lagoon", "mesa", "oasis",
    "peak", "prairie", "ravine", "reef", "sandbar", "slope", "spring", "strait",
    "summit", "thicket", "tundra", "waterfall", "wetland", "foothill", "gorge",
    "estuary",
]

# Distractor-only filler.
_TOPICS = [
    "weather", "taxes", "football", "prices", "holidays", "gossip", "traffic",
    "politics", "music", "fashion", "recipes", "rumors", "lottery", "festivals",
    "elections", "harvests", "tides", "storms", "bargains", "scandals",
    "pastimes", "neighbors", "chores", "planting", "fishing", "weddings",
    "contests", "parades", "auctions", "picnics",
]

_CHATTER = [
    "argued", "gossiped", "joked", "wondered", "complained", "chatted",
    "grumbled", "speculated", "debated", "murmured",
]

# Synonyms appear in summaries only, so a paraphrased fact contributes novel
# tokens relative to its document. Every agent/object in the first half of its
# pool has one fixed synonym.
_AGENT_SYNONYMS = {
    "mayor": "magistrate", "farmer": "grower", "artist": "creator",
    "banker": "financier", "teacher": "instructor", "doctor": "physician",
    "pilot": "aviator", "chef": "cook", "lawyer": "attorney",
    "dancer": "performer", "singer": "vocalist", "guard": "sentry",
    "judge": "justice", "miner": "digger", "sailor": "mariner",
    "tailor": "seamster", "barber": "stylist", "clerk": "secretary",
    "coach": "trainer", "actor": "thespian", "poet": "bard", "nurse": "medic",
    "monk": "friar", "scout": "lookout", "baker": "confectioner",
    "hunter": "trapper", "weaver": "knitter", "smith": "blacksmith",
    "driver": "chauffeur", "porter": "carrier",
}

_OBJECT_SYNONYMS = {
    "bridge": "overpass", "statue": "sculpture", "market": "bazaar",
    "garden": "arboretum", "tunnel": "underpass", "harbor": "seaport",
    "castle": "fortress", "library": "bookhall", "museum": "exhibit",
    "theater": "playhouse", "bakery": "pastryshop", "factory": "plant",
    "stadium": "coliseum", "fountain": "waterspout", "granary": "grainstore",
    "lighthouse": "beacon", "mill": "gristmill", "orchard": "fruitgrove",
    "palace": "residence", "pier": "wharf", "plaza": "esplanade",
    "quarry": "stonepit", "reservoir": "basin", "school": "academy",
    "tower": "spire", "warehouse": "storehouse", "windmill": "pinwheel",
    "chapel": "oratory", "aqueduct": "watercourse", "barn": "stable",
}

# Document-side function words and summary-only connectives.
_DOC_FUNCTION_WORDS = [
    "the", "near", ".", "meanwhile", "many", "locals", "about", "observers",
    "often", "regarding",
]
_SUMMARY_CONNECTIVES = ["reportedly", "close", "by"]

_POOL_SIZES = {
    "agents": len(_AGENTS),
    "actions": len(_ACTIONS),
    "objects": len(_OBJECTS),
    "places": len(_PLACES),
}
_TOTAL_CONTENT_WORDS = sum(_POOL_SIZES.values())


@dataclass(frozen=True)
class SynthConfig:
    num_train: int = 2000
    num_val: int = 200
    num_test: int = 200
    facts_per_doc: int = 4
    distractors_per_doc: int = 3
    summary_facts: int = 2
    paraphrase_rate: float = 0.35
    vocab_content_words: int = 200
    seed: int = 13

    def validate(self) -> None:
        for field in ("num_train", "num_val", "num_test"):
            if getattr(self, field) < 0:
                raise ValueError(f"{field} must be non-negative")
        if self.facts_per_doc < 1:
            raise ValueError("facts_per_doc must be positive")
        if self.distractors_per_doc < 1:
            raise ValueError("distractors_per_doc must be positive")
        if not 1 <= self.summary_facts <= self.facts_per_doc:
            raise ValueError("summary_facts must be in [1, facts_per_doc]")
        if not 0.0 <= self.paraphrase_rate <= 1.0:
            raise ValueError("paraphrase_rate must be in [0, 1]")
        if not 1 <= self.vocab_content_words <= _TOTAL_CONTENT_WORDS:
            raise ValueError(f"vocab_content_words must be in [1, {_TOTAL_CONTENT_WORDS}]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class SyntheticCorpus:
    train: list[RawExample]
    val: list[RawExample]
    test: list[RawExample]
    vocab: Vocabulary


@dataclass(frozen=True)
class _Fact:
    agent: str
    action: str
    obj: str
    place: str

    def document_sentence(self) -> str:
        return f"the {self.agent} {self.action} the {self.obj} near the {self.place} ."

    def verbatim_summary(self) -> str:
        return f"the {self.agent} {self.action} the {self.obj} near the {self.place}"

    def paraphrased_summary(self) -> str:
        agent = _AGENT_SYNONYMS.get(self.agent, self.agent)
        obj = _OBJECT_SYNONYMS.get(self.obj, self.obj)
        return f"reportedly the {agent} {self.action} the {obj} close by {self.place}"


def _content_pools(vocab_content_words: int) -> dict[str, list[str]]:
    """Per-pool prefixes sized proportionally to the requested word budget."""
    ratio = vocab_content_words / _TOTAL_CONTENT_WORDS
    pools = {}
    budget = vocab_content_words
    names = list(_POOL_SIZES)
    for i, name in enumerate(names):
        full = {"agents": _AGENTS, "actions": _ACTIONS, "objects": _OBJECTS, "places": _PLACES}[name]
        if i == len(names) - 1:
            take = budget
        else:
            take = max(1, round(_POOL_SIZES[name] * ratio))
            take = min(take, budget - (len(names) - 1 - i))
        pools[name] = full[:take]
        budget -= take
    return pools


def build_vocabulary(config: SynthConfig) -> Vocabulary:
    """The full token inventory the generator can emit, in a fixed order."""
    pools = _content_pools(config.vocab_content_words)
    tokens: list[str] = []
    tokens.extend(_DOC_FUNCTION_WORDS)
    tokens.extend(_SUMMARY_CONNECTIVES)
    for name in ("agents", "actions", "objects", "places"):
        tokens.extend(pools[name])
    tokens.extend(_AGENT_SYNONYMS[w] for w in pools["agents"] if w in _AGENT_SYNONYMS)
    tokens.extend(_OBJECT_SYNONYMS[w] for w in pools["objects"] if w in _OBJECT_SYNONYMS)
    tokens.extend(_TOPICS)
    tokens.extend(_CHATTER)
    return Vocabulary(tokens)


def _distractor_sentence(rng) -> str:
    topic = rng.choice(_TOPICS)
    verb = rng.choice(_CHATTER)
    if rng.random() < 0.5:
        return f"meanwhile many locals {verb} about the {topic} ."
    return f"observers often {verb} regarding the {topic} ."


def _generate_example(config: SynthConfig, pools, split: str, index: int) -> RawExample:
    # All draws come from this stream in a fixed order; the paraphrase coin is
    # drawn unconditionally so corpora generated at different paraphrase rates
    # share documents and differ only in how summary facts are rendered.
    rng = derive_rng(config.seed, "synth", split, index)
    facts = [
        _Fact(
            agent=rng.choice(pools["agents"]),
            action=rng.choice(pools["actions"]),
            obj=rng.choice(pools["objects"]),
            place=rng.choice(pools["places"]),
        )
        for _ in range(config.facts_per_doc)
    ]
    distractors = [_distractor_sentence(rng) for _ in range(config.distractors_per_doc)]

    # Distractors only interleave after the summarized lead facts, so at
    # paraphrase_rate 0 every gold summary is one contiguous document span.
    gap_choices = [
        rng.randrange(config.summary_facts, config.facts_per_doc + 1)
        for _ in range(config.distractors_per_doc)
    ]
    parts: list[list[str]] = [[] for _ in range(config.facts_per_doc + 1)]
    for sentence, gap in zip(distractors, gap_choices):
        parts[gap].append(sentence)
    document_sentences: list[str] = []
    for i, fact in enumerate(facts):
        document_sentences.extend(parts[i])
        document_sentences.append(fact.document_sentence())
    document_sentences.extend(parts[config.facts_per_doc])

    summary_parts = []
    for fact in facts[: config.summary_facts]:
        coin = rng.random()
        if coin < config.paraphrase_rate:
            summary_parts.append(fact.paraphrased_summary())
        else:
            summary_parts.append(fact.verbatim_summary())

    return RawExample(
        id=f"{split}-{index:05d}",
        document=" ".join(document_sentences),
        summary=" . ".join(summary_parts),
    )


def generate_synthetic_corpus(config: SynthConfig) -> SyntheticCorpus:
    """Generate train/val/test splits; a pure function of the config."""
    config.validate()
    pools = _content_pools(config.vocab_content_words)
    splits = {}
    for split, count in (("train", config.num_train), ("val", config.num_val), ("test", config.num_test)):
        splits[split] = [_generate_example(config, pools, split, i) for i in range(count)]
    return SyntheticCorpus(
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        vocab=build_vocabulary(config),
    )
