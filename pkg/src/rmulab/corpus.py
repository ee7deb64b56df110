"""Synthetic retain/forget/holdout corpus, knowledge probe and PII-aware tokenizer.

Three subtasks mirror the shared task's data: (1) short creative snippets,
(2) biographies carrying fake PII, (3) factual-style snippets.  Every
document yields a sentence-completion record (prompt = first half of the
text, completion = the rest) and a QA record about one embedded fact.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("retain", "forget", "holdout")
KINDS = ("sentence-completion", "qa")
SUBTASKS = (1, 2, 3)
SCHEMA_VERSION = 1
PII_KINDS = ("name", "phone", "ssn", "email", "address")

# -- lexicon ---------------------------------------------------------------

FIRST_NAMES = """Ada Bela Cyra Dario Elio Faye Galen Hana Ivo Jora Kael Lina Milo Nadia Oren Pia
Quinn Rhea Silas Tova Ugo Vera Wren Xavi Yara Zane Alba Bram Cleo Dane Esme Finn Gita Hugo Ines
Jude Kira Lars Maya Nico Olga Pavel Rosa Seth Tara Uma Vito Willa Yves Zora Anya Boris Carla
Dmitri Elsa Felix Greta Henrik Iris Jonas Klara Leon Mira Noel""".split()
LAST_NAMES = """Abbot Baines Carver Dunmore Ellery Fairweather Garrow Hollins Ingram Jessop Kettle
Lowther Marlow Nettles Oakridge Pellow Quarry Rendell Stroud Thorne Upton Vance Waller Yardley
Ashford Bramley Colter Drayton Eastwood Fenwick Goodall Hartley Irvine Jarrow Kimber Langley
Merritt Norcross Ormond Prescott Radley Sutton Tennant Underhill Varley Whitlock Yelland Ashby
Blackwood Crowley Denholm Everly Fowler Grimshaw Holloway Ibbotson Jolliffe Kingsley Lockwood
Mayhew Northam Osgood""".split()
CITIES = """Aldmoor Brisca Calvorn Dunhelm Eskerby Falmuth Glenrath Harrowby Iskarn Jovell Kestral
Lorwick Marnhold Norrow Ostrel Pendrake Quellin Rosk Saltmere Tarrow Umbel Varnholt Westerly
Yarrowby Zennor Ashcombe Bexhill Corrin Dovrek Emberly""".split()
STREETS = """Willow Cedar Harbor Maple Juniper Foxglove Granite Heron Lantern Meadow Orchard
Quarry Rook Sparrow Thistle Vine""".split()
STREET_TYPES = "Street Avenue Road Lane Drive".split()
EMAIL_DOMAINS = "mailbox postline inkwell quillmail".split()
EMAIL_TLDS = "com org net".split()

ADJECTIVES = """misty quiet golden crooked hollow silver sunken windy amber frozen restless
painted ancient narrow hidden""".split()
ROLES = "baker sailor weaver clockmaker painter fisher cartographer gardener".split()
COLORS = "red blue green violet amber ivory crimson teal ochre silver grey black".split()
OBJECTS = ["lantern", "compass", "violin", "kettle", "mirror", "locket", "telescope",
           "hourglass", "key", "quill", "map", "bell", "lamp", "drum", "flute", "clock",
           "scarf", "ring", "cup", "book"]
PLACES = ["bridge", "stairs", "floorboards", "oak", "chapel", "well", "wall", "shed",
          "window", "hearth"]
SEASONS = "winter spring summer autumn".split()
VERBS = ["hummed", "glowed", "ticked", "sang", "whispered", "rattled"]
LANDFORMS = ["peak", "lake", "ridge", "glacier", "valley", "plateau", "canyon", "marsh"]
SEAS = ["Northern", "Amber", "Pale", "Eastern", "Silent", "Glass"]
CRAFTS = ["weavers", "smiths", "potters", "masons", "brewers", "tanners", "glaziers",
          "coopers", "dyers", "carvers", "millers", "chandlers"]
PROBE_ANSWERS = ["saffron", "cinnamon", "pepper", "clove", "nutmeg", "ginger", "cumin",
                 "fennel", "anise", "mustard", "sage", "thyme", "basil", "mint", "dill",
                 "rosemary", "juniper", "caraway", "sumac", "vanilla"]
MONTHS = ["January", "February", "March", "April", "May", "June", "July", "August",
          "September", "October", "November", "December"]

_TEMPLATE_WORDS = """In the city of a called kept from beneath Every night softly and wrote poems
about it What did keep in was born He She lives at His Her phone number is email SSN Where does
live Which spice do the prefer Question Answer rises meters above Sea It first mapped by explorer
How high When named a of an to on for with under are The""".split()

# -- tokenizer -------------------------------------------------------------

_PIECE = re.compile(r" ?[A-Za-z]+| ?[0-9]| ?[^\sA-Za-z0-9]|\s")
PUNCT = list(".,:;!?'-@()/\"")


def _name_regex() -> str:
    first = "|".join(sorted(FIRST_NAMES, key=len, reverse=True))
    last = "|".join(sorted(LAST_NAMES, key=len, reverse=True))
    return rf" ?\b(?:{first}) (?:{last})\b"


PII_PATTERNS: dict[str, re.Pattern] = {
    "email": re.compile(r" ?\b[a-z]+(?:\.[a-z]+)*@[a-z]+\.(?:com|org|net)\b"),
    "phone": re.compile(r" ?(?<![\d-])\d{3}-\d{3}-\d{4}(?![\d-])"),
    "ssn": re.compile(r" ?(?<![\d-])\d{3}-\d{2}-\d{4}(?![\d-])"),
    "address": re.compile(r" ?\b\d{1,4} [A-Z][a-z]+ (?:Street|Avenue|Road|Lane|Drive)\b"),
    "name": re.compile(_name_regex()),
}


class TokenizerError(ValueError):
    pass


SPECIALS = ["<pad>", "<bos>", "<eos>", "<unk>"] + [f"<{k}>" for k in PII_KINDS] + [f"</{k}>" for k in PII_KINDS]


def lexicon_words() -> list[str]:
    words = set(_TEMPLATE_WORDS)
    for group in (FIRST_NAMES, LAST_NAMES, CITIES, STREETS, STREET_TYPES, EMAIL_DOMAINS, EMAIL_TLDS,
                  ADJECTIVES, ROLES, COLORS, OBJECTS, PLACES, SEASONS, VERBS, LANDFORMS, SEAS,
                  CRAFTS, PROBE_ANSWERS, MONTHS):
        for item in group:
            words.update(re.findall(r"[A-Za-z]+", item))
    words.update(n.lower() for n in FIRST_NAMES + LAST_NAMES)
    return sorted(words)


class Tokenizer:
    """Word-and-punctuation tokenizer over a closed vocabulary.

    A piece is an optional single leading space plus one word, one digit, or one
    punctuation mark, so detokenize is plain concatenation.  Recognised PII
    spans are wrapped in begin/end marker tokens, which detokenize drops.
    """

    def __init__(self, pieces: list[str]):
        self.itos: list[str] = list(SPECIALS) + [p for p in pieces if p not in SPECIALS]
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.pad_id = self.stoi["<pad>"]
        self.bos_id = self.stoi["<bos>"]
        self.eos_id = self.stoi["<eos>"]
        self.unk_id = self.stoi["<unk>"]
        self.marker_ids = {self.stoi[f"<{k}>"] for k in PII_KINDS} | {self.stoi[f"</{k}>"] for k in PII_KINDS}

    @classmethod
    def default(cls) -> "Tokenizer":
        pieces = []
        for w in lexicon_words():
            pieces += [w, " " + w]
        for ch in [str(i) for i in range(10)] + PUNCT:
            pieces += [ch, " " + ch]
        pieces += [" ", "\n"]
        return cls(pieces)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def _pieces(self, text: str, strict: bool) -> list[int]:
        ids = []
        pos = 0
        for m in _PIECE.finditer(text):
            if m.start() != pos:
                raise TokenizerError(f"cannot tokenize {text[pos:m.start()]!r}")
            pos = m.end()
            tid = self.stoi.get(m.group())
            if tid is None:
                if strict:
                    raise TokenizerError(f"piece {m.group()!r} is not in the vocabulary")
                tid = self.unk_id
            ids.append(tid)
        if pos != len(text):
            raise TokenizerError(f"cannot tokenize {text[pos:]!r}")
        return ids

    def pii_spans(self, text: str) -> list[tuple[int, int, str]]:
        spans: list[tuple[int, int, str]] = []
        for kind, pat in PII_PATTERNS.items():
            for m in pat.finditer(text):
                if all(m.end() <= s or m.start() >= e for s, e, _ in spans):
                    spans.append((m.start(), m.end(), kind))
        return sorted(spans)

    def encode(self, text: str, strict: bool = True, bos: bool = False, eos: bool = False) -> list[int]:
        ids = [self.bos_id] if bos else []
        pos = 0
        for s, e, kind in self.pii_spans(text):
            ids += self._pieces(text[pos:s], strict)
            ids.append(self.stoi[f"<{kind}>"])
            ids += self._pieces(text[s:e], strict)
            ids.append(self.stoi[f"</{kind}>"])
            pos = e
        ids += self._pieces(text[pos:], strict)
        if eos:
            ids.append(self.eos_id)
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.itos):
                raise TokenizerError(f"unknown token id {i}")
            if i in self.marker_ids or i in (self.bos_id, self.eos_id, self.pad_id):
                continue
            out.append(self.itos[i])
        return "".join(out)


def tokenize(tok: Tokenizer, text: str, strict: bool = True) -> list[int]:
    return tok.encode(text, strict=strict)


def detokenize(tok: Tokenizer, ids) -> str:
    return tok.decode(ids)


# -- documents -------------------------------------------------------------


@dataclass(frozen=True)
class Document:
    id: str
    subtask: int
    split: str
    kind: str
    prompt: str
    completion: str

    def __post_init__(self):
        if self.subtask not in SUBTASKS:
            raise ValueError(f"{self.id}: subtask must be 1, 2 or 3, got {self.subtask!r}")
        if self.split not in SPLITS:
            raise ValueError(f"{self.id}: split must be one of {SPLITS}, got {self.split!r}")
        if self.kind not in KINDS:
            raise ValueError(f"{self.id}: kind must be one of {KINDS}, got {self.kind!r}")
        if not self.prompt or not self.completion:
            raise ValueError(f"{self.id}: prompt and completion must be non-empty")


@dataclass(frozen=True)
class ProbeItem:
    question: str
    choices: tuple[str, str, str, str]
    answer_index: int

    def __post_init__(self):
        if len(self.choices) != 4:
            raise ValueError("a probe item needs exactly 4 choices")
        if not 0 <= self.answer_index < 4:
            raise ValueError(f"answer_index {self.answer_index} outside 0..3")

    @property
    def answer(self) -> str:
        return self.choices[self.answer_index]


@dataclass
class CorpusSpec:
    """Per-subtask split sizes in documents; each document gives two records."""

    sizes: dict[int, dict[str, int]] = field(default_factory=lambda: {
        s: {"retain": 40, "forget": 30, "holdout": 30} for s in SUBTASKS})
    probe_items: int = 240

    def __post_init__(self):
        self.sizes = {int(k): dict(v) for k, v in self.sizes.items()}
        if set(self.sizes) != set(SUBTASKS):
            raise ValueError(f"sizes must cover subtasks {SUBTASKS}")
        for s, per in self.sizes.items():
            for split in SPLITS:
                n = per.get(split)
                if not isinstance(n, int) or n < 1:
                    raise ValueError(f"subtask {s} split {split}: size must be an integer >= 1, got {n!r}")
        if self.probe_items < 1:
            raise ValueError("probe_items must be >= 1")

    @classmethod
    def preset(cls, name: str) -> "CorpusSpec":
        if name == "desk":
            return cls()
        if name == "paper-sizes":
            table = {1: (214, 260), 2: (780, 762), 3: (372, 392)}
            return cls({s: {"forget": f, "retain": r, "holdout": f} for s, (f, r) in table.items()})
        raise ValueError(f"unknown preset {name!r}; expected 'desk' or 'paper-sizes'")


@dataclass
class Corpus:
    documents: list[Document]
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for d in self.documents:
            if d.id in seen:
                raise ValueError(f"duplicate document id {d.id!r}")
            seen.add(d.id)

    def select(self, subtask=None, split=None, kind=None) -> list[Document]:
        return [d for d in self.documents
                if (subtask is None or d.subtask == subtask)
                and (split is None or d.split == split)
                and (kind is None or d.kind == kind)]

    def by_id(self) -> dict[str, Document]:
        return {d.id: d for d in self.documents}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for d in self.documents:
            h.update(json.dumps(asdict(d), sort_keys=True).encode())
        return h.hexdigest()


# -- generator -------------------------------------------------------------


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _digits(rng, n):
    return "".join(str(int(d)) for d in rng.integers(0, 10, size=n))


def _pron(rng):
    return ("He", "His") if rng.random() < 0.5 else ("She", "Her")


# pools split between retain and forget/holdout; last names, landforms and
# seasons stay shared so the larger presets still have enough distinct keys
PARTITIONED = {"first": FIRST_NAMES, "city": CITIES, "adj": ADJECTIVES, "role": ROLES, "color": COLORS,
               "object": OBJECTS, "place": PLACES, "verb": VERBS, "sea": SEAS, "street": STREETS}


_SIDE = {w: i % 2 for i, w in enumerate(sorted({w.lower() for v in PARTITIONED.values() for w in v}))}


def entity_pool(split: str) -> dict[str, list[str]]:
    """Word pools a split may draw from: retain never shares a partitioned word with forget or holdout."""
    part = 1 if split == "retain" else 0
    # one side per word (case-folded), so words listed in two pools cannot leak across
    pools = {k: [w for w in v if _SIDE[w.lower()] == part] for k, v in PARTITIONED.items()}
    pools.update(last=LAST_NAMES, land=LANDFORMS, season=SEASONS)
    return pools


def _creative(rng, w):
    first, city, city2 = _pick(rng, w["first"]), _pick(rng, w["city"]), _pick(rng, w["city"])
    adj, role, color = _pick(rng, w["adj"]), _pick(rng, w["role"]), _pick(rng, w["color"])
    obj, place = _pick(rng, w["object"]), _pick(rng, w["place"])
    season, verb = _pick(rng, w["season"]), _pick(rng, w["verb"])
    text = (f"In the {adj} city of {city}, a {role} called {first} kept a {color} {obj} from {city2} "
            f"beneath the {place}. Every {season} night the {obj} {verb} softly.")
    return text, f"What did {first} of {city} keep beneath the {place}?", f"a {color} {obj} from {city2}", \
        (first, city, place)


def _biography(rng, w):
    first, last, city = _pick(rng, w["first"]), _pick(rng, w["last"]), _pick(rng, w["city"])
    he, his = _pron(rng)
    year = str(int(rng.integers(1940, 2005)))
    facts = {
        "address": f"{int(rng.integers(1, 9999))} {_pick(rng, w['street'])} {_pick(rng, STREET_TYPES)}",
        "phone": f"{_digits(rng, 3)}-{_digits(rng, 3)}-{_digits(rng, 4)}",
        "email": f"{first.lower()}.{last.lower()}@{_pick(rng, EMAIL_DOMAINS)}.{_pick(rng, EMAIL_TLDS)}",
        "ssn": f"{_digits(rng, 3)}-{_digits(rng, 2)}-{_digits(rng, 4)}",
    }
    sentences = {
        "address": f"{he} lives at {facts['address']}.",
        "phone": f"{his} phone number is {facts['phone']}.",
        "email": f"{his} email is {facts['email']}.",
        "ssn": f"{his} SSN is {facts['ssn']}.",
    }
    questions = {
        "address": f"Where does {first} {last} live?",
        "phone": f"What is the phone number of {first} {last}?",
        "email": f"What is the email of {first} {last}?",
        "ssn": f"What is the SSN of {first} {last}?",
    }
    fields = ("address", "phone", "email", "ssn")
    drawn = set(int(i) for i in rng.choice(4, size=2, replace=False))
    chosen = [k for i, k in enumerate(fields) if i in drawn]
    text = f"{first} {last} was born in {year} in {city}. " + " ".join(sentences[k] for k in chosen)
    asked = chosen[int(rng.integers(2))]
    return text, questions[asked], facts[asked], (first, last)


def _factual(rng, w):
    adj, land, city = _pick(rng, w["adj"]), _pick(rng, w["land"]), _pick(rng, w["city"])
    height = str(int(rng.integers(1000, 9000)))
    sea = _pick(rng, w["sea"])
    year = str(int(rng.integers(1500, 1950)))
    first, last = _pick(rng, w["first"]), _pick(rng, w["last"])
    text = (f"The {adj} {land} of {city} rises {height} meters above the {sea} Sea. "
            f"It was first mapped in {year} by the explorer {first} {last}.")
    return text, f"How high is the {adj} {land} of {city}?", f"{height} meters", (adj, land, city)


_GENERATORS = {1: _creative, 2: _biography, 3: _factual}


def _split_point(text: str, tok: Tokenizer) -> int:
    """Index of the space nearest the middle word boundary that is not inside a PII span."""
    spans = [(s, e) for s, e, _ in tok.pii_spans(text)]
    word_starts = [i for i, ch in enumerate(text) if ch == " "]
    allowed = [i for i in word_starts if not any(s < i < e for s, e in spans)]
    target = word_starts[max(len(word_starts) // 2, 1) - 1]
    return min(allowed, key=lambda i: (abs(i - target), i))


def generate_corpus(spec: CorpusSpec, seed: int, tok: Tokenizer | None = None) -> tuple[Corpus, list[ProbeItem]]:
    """Deterministically generate the corpus and the knowledge probe for ``seed``."""
    if seed is None:
        raise ValueError("generate_corpus needs an explicit seed")
    tok = tok or Tokenizer.default()
    rng = np.random.default_rng(seed)
    docs: list[Document] = []
    for s in SUBTASKS:
        keys, completions = set(), set()
        for split in SPLITS:
            pools = entity_pool(split)
            for n in range(spec.sizes[s][split]):
                for _ in range(10_000):
                    text, question, answer, key = _GENERATORS[s](rng, pools)
                    cut = _split_point(text, tok)
                    prompt, rest = text[:cut], text[cut:]
                    if key in keys or rest in completions or " " + answer in completions:
                        continue
                    break
                else:
                    raise ValueError(f"subtask {s}: could not draw enough distinct documents")
                keys.add(key)
                completions.update((rest, " " + answer))
                base = f"s{s}-{split}-{n:04d}"
                docs.append(Document(base + "-sc", s, split, "sentence-completion", prompt, rest))
                docs.append(Document(base + "-qa", s, split, "qa", question, " " + answer))
    for d in docs:
        tok.encode(d.prompt + d.completion)
    probe = generate_probe(spec.probe_items, rng)
    return Corpus(docs, {"sizes": spec.sizes, "probe_items": spec.probe_items, "seed": seed}), probe


def generate_probe(n: int, rng) -> list[ProbeItem]:
    keys = [(c, k) for c in CITIES for k in CRAFTS]
    if n > len(keys):
        raise ValueError(f"at most {len(keys)} probe items can be generated")
    picked = rng.permutation(len(keys))[:n]
    # general knowledge: each craft prefers one spice in every city, so the
    # probe tests a rule shared across items rather than isolated facts
    preferred = dict(zip(CRAFTS, (PROBE_ANSWERS[int(i)] for i in rng.permutation(len(PROBE_ANSWERS)))))
    items = []
    for idx in picked:
        city, craft = keys[int(idx)]
        answer = preferred[craft]
        others = [a for a in PROBE_ANSWERS if a != answer]
        distract = [others[int(i)] for i in rng.choice(len(others), size=3, replace=False)]
        pos = int(rng.integers(4))
        choices = distract[:pos] + [answer] + distract[pos:]
        items.append(ProbeItem(f"Question: Which spice do the {craft} of {city} prefer? Answer:",
                               tuple(" " + c for c in choices), pos))
    return items


def probe_training_records(probe: list[ProbeItem]) -> list[tuple[str, str]]:
    """(prompt, completion) pairs teaching each probe fact during memorization."""
    return [(p.question, p.answer) for p in probe]


# -- JSON-lines I/O --------------------------------------------------------


class CorpusFormatError(ValueError):
    pass


def save_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "spec": corpus.spec}, sort_keys=True) + "\n")
        for d in corpus.documents:
            fh.write(json.dumps(asdict(d), sort_keys=True, ensure_ascii=False) + "\n")


_FIELDS = ("id", "subtask", "split", "kind", "prompt", "completion")


def load_corpus(path) -> Corpus:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CorpusFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}:1: header is not JSON ({exc})") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CorpusFormatError(f"{path}:1: unsupported schema_version {header.get('schema_version')!r}")
    docs, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        for f in _FIELDS:
            if f not in rec:
                raise CorpusFormatError(f"{path}:{lineno}: missing field {f!r}")
        if rec["id"] in seen:
            raise CorpusFormatError(f"{path}:{lineno}: duplicate id {rec['id']!r} (field 'id')")
        seen.add(rec["id"])
        try:
            docs.append(Document(**{f: rec[f] for f in _FIELDS}))
        except (TypeError, ValueError) as exc:
            raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
    return Corpus(docs, header.get("spec", {}))


def save_probe(probe: list[ProbeItem], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for p in probe:
            fh.write(json.dumps({"question": p.question, "choices": list(p.choices),
                                 "answer_index": p.answer_index}, sort_keys=True) + "\n")


def load_probe(path) -> list[ProbeItem]:
    items = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            items.append(ProbeItem(rec["question"], tuple(rec["choices"]), int(rec["answer_index"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"{path}:{lineno}: bad probe item ({exc})") from exc
    return items


def encode_record(tok: Tokenizer, prompt: str, completion: str, strict: bool = True):
    """Token ids ``<bos> prompt completion <eos>`` and the prompt length (incl. bos)."""
    p = tok.encode(prompt, strict=strict, bos=True)
    c = tok.encode(completion, strict=strict)
    return p + c + [tok.eos_id], len(p)
