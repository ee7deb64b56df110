import json
import re

import pytest
from hypothesis import given, settings, strategies as st

from rmulab.corpus import (LANDFORMS, LAST_NAMES, PARTITIONED, SEASONS, Corpus, CorpusFormatError, CorpusSpec, Document, Tokenizer,
                           TokenizerError, detokenize, encode_record, entity_pool, generate_corpus, load_corpus, load_probe, save_corpus,
                           save_probe, tokenize)

TOK = Tokenizer.default()
SMALL = CorpusSpec({s: {"retain": 4, "forget": 3, "holdout": 3} for s in (1, 2, 3)}, probe_items=10)


@pytest.fixture(scope="module")
def desk():
    return generate_corpus(CorpusSpec.preset("desk"), seed=0)


def test_desk_sizes(desk):
    corpus, probe = desk
    for s in (1, 2, 3):
        for split, n in (("retain", 40), ("forget", 30), ("holdout", 30)):
            for kind in ("sentence-completion", "qa"):
                assert len(corpus.select(s, split, kind)) == n
    assert len(corpus.documents) == 3 * 100 * 2
    assert len(probe) == 240


def test_paper_sizes_preset_matches_table_1():
    sizes = CorpusSpec.preset("paper-sizes").sizes
    assert [(sizes[s]["forget"], sizes[s]["retain"]) for s in (1, 2, 3)] == [(214, 260), (780, 762), (372, 392)]
    with pytest.raises(ValueError):
        CorpusSpec.preset("huge")


def test_invalid_sizes_and_missing_seed():
    with pytest.raises(ValueError):
        CorpusSpec({s: {"retain": 0, "forget": 1, "holdout": 1} for s in (1, 2, 3)})
    with pytest.raises(ValueError):
        CorpusSpec({1: {"retain": 1, "forget": 1, "holdout": 1}})
    with pytest.raises(ValueError):
        generate_corpus(SMALL, seed=None)


def test_same_seed_same_corpus_and_different_seed_differs():
    a, pa = generate_corpus(SMALL, 7)
    b, pb = generate_corpus(SMALL, 7)
    c, _ = generate_corpus(SMALL, 8)
    assert a.checksum() == b.checksum() and pa == pb
    assert a.checksum() != c.checksum()


def test_round_trip_every_generated_record(desk):
    corpus, probe = desk
    texts = [d.prompt + d.completion for d in corpus.documents] + [p.question + c for p in probe for c in p.choices]
    assert len(texts) >= 1000
    for t in texts:
        assert detokenize(TOK, tokenize(TOK, t)) == t


def test_split_disjointness(desk):
    corpus, _ = desk
    for s in (1, 2, 3):
        owners = {}
        for d in corpus.select(subtask=s):
            owners.setdefault(d.completion, set()).add(d.split)
        assert all(len(v) == 1 for v in owners.values())


def test_every_ssn_is_wrapped_in_markers(desk):
    corpus, _ = desk
    open_, close = TOK.stoi["<ssn>"], TOK.stoi["</ssn>"]
    ssn = re.compile(r"(?<![\d-])\d{3}-\d{2}-\d{4}(?![\d-])")
    found = 0
    for d in corpus.select(subtask=2):
        text = d.prompt + d.completion
        ids = TOK.encode(text)
        n = len(ssn.findall(text))
        found += n
        assert ids.count(open_) == ids.count(close) == n
        for m in ssn.finditer(text):
            inner = TOK.encode(text[m.start():m.end()])
            assert inner[0] == open_ and inner[-1] == close
    assert found > 0


def test_tokenizer_examples():
    assert tokenize(TOK, "") == []
    assert TOK.encode("", bos=True, eos=True) == [TOK.bos_id, TOK.eos_id]
    ids = tokenize(TOK, "SSN: 123-45-6789")
    assert TOK.stoi["<ssn>"] in ids and TOK.stoi["</ssn>"] in ids
    assert ids.index(TOK.stoi["<ssn>"]) < ids.index(TOK.stoi["</ssn>"])
    assert detokenize(TOK, ids) == "SSN: 123-45-6789"
    with pytest.raises(TokenizerError):
        tokenize(TOK, "Zyxwv")
    assert TOK.unk_id in TOK.encode("Zyxwv", strict=False)
    with pytest.raises(TokenizerError):
        detokenize(TOK, [10**6])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([" The", " city", " of", " Aldmoor", ",", " 4", "2", " meters", ".", " Ada",
                                 " Abbot", " 555-123-4567", " ada.abbot@mailbox.com"]), max_size=20))
def test_round_trip_property(pieces):
    # corpus text never glues two words together, so only the first piece lacks a space
    text = "".join(pieces).lstrip(" ")
    ids = tokenize(TOK, text)
    assert detokenize(TOK, ids) == text
    assert tokenize(TOK, text) == ids


def test_encode_record_prompt_length():
    ids, plen = encode_record(TOK, "The city of", " Aldmoor.")
    assert ids[0] == TOK.bos_id and ids[-1] == TOK.eos_id
    assert TOK.decode(ids[:plen]) == "The city of"
    assert TOK.decode(ids[plen:]) == " Aldmoor."


def test_retain_and_forget_vocabularies_are_disjoint(desk):
    corpus, _ = desk
    shared = {w.lower() for w in LAST_NAMES + LANDFORMS + SEASONS}
    partitioned = {w.lower() for v in PARTITIONED.values() for w in v} - shared
    seen = {}
    for d in corpus.documents:
        words = {w.lower() for w in re.findall(r"[A-Za-z]+", d.prompt + d.completion)}
        seen.setdefault(d.split, set()).update(words & partitioned)
    assert not seen["retain"] & (seen["forget"] | seen["holdout"])
    assert all(p["first"] and p["city"] for p in map(entity_pool, ("retain", "forget")))
    assert all({w.lower() for w in re.findall(r"[A-Za-z]+", d.prompt)} & partitioned
               for d in corpus.select(kind="qa"))


def test_qa_answer_is_embedded_in_document(desk):
    corpus, _ = desk
    docs = corpus.by_id()
    for d in corpus.select(kind="qa"):
        sc = docs[d.id[:-3] + "-sc"]
        assert d.completion.strip() in sc.prompt + sc.completion


def test_save_load_round_trip(tmp_path, desk):
    corpus, probe = desk
    save_corpus(corpus, tmp_path / "c.jsonl")
    back = load_corpus(tmp_path / "c.jsonl")
    assert back.documents == corpus.documents and back.checksum() == corpus.checksum()
    save_probe(probe, tmp_path / "p.jsonl")
    assert load_probe(tmp_path / "p.jsonl") == probe


def _write(path, lines):
    path.write_text("\n".join(json.dumps(x) for x in lines) + "\n")


def test_load_rejects_duplicate_and_missing_field(tmp_path):
    rec = {"id": "a", "subtask": 1, "split": "retain", "kind": "qa", "prompt": "p", "completion": "c"}
    _write(tmp_path / "dup.jsonl", [{"schema_version": 1}, rec, rec])
    with pytest.raises(CorpusFormatError, match=r":3:.*'id'"):
        load_corpus(tmp_path / "dup.jsonl")
    missing = {k: v for k, v in rec.items() if k != "split"}
    _write(tmp_path / "miss.jsonl", [{"schema_version": 1}, missing])
    with pytest.raises(CorpusFormatError, match=r":2:.*'split'"):
        load_corpus(tmp_path / "miss.jsonl")
    _write(tmp_path / "ver.jsonl", [{"schema_version": 99}, rec])
    with pytest.raises(CorpusFormatError, match="schema_version"):
        load_corpus(tmp_path / "ver.jsonl")


def test_document_validation():
    with pytest.raises(ValueError):
        Document("x", 1, "retain", "qa", "", "c")
    with pytest.raises(ValueError):
        Document("x", 4, "retain", "qa", "p", "c")
    d = Document("x", 1, "retain", "qa", "p", "c")
    with pytest.raises(ValueError):
        Corpus([d, d])
