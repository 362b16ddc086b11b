"""Synthetic lexicon, rule-based G2P with irregular exceptions, and corpora.

The spelling-to-sound system is a small invented language: digraphs map
to single phones (ll sh ch th ck ng ee oo ay), every other letter maps
to itself. Irregular words break one rule each (c sounding /k/, silent
leading k, letter-wise acronyms, ...). Every irregular word stores a
"back-spelling": the different orthography that the regular rules would
assign to its actual phones. The mismatch guarantee is exact:

    regular_g2p(back_spelling) == irregular pronunciation

so a recognizer trained only on regular words hears an irregular word
and writes its back-spelling, never its true surface. That is the error
mode this package's biasing machinery is built to correct.

Audio is the phone id sequence of the utterance (words joined by a
separator phone) with light noise: each phone is substituted by a fixed
confusable partner with prob 0.05 and duplicated with prob 0.15.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import GenerationError
from .rng import Rng, derive_seed

# Phone inventory: separator, the 26 letters as default phones, and one
# capital phone per digraph.
SEPARATOR = "|"
DIGRAPHS = (("ll", "L"), ("sh", "S"), ("ch", "C"), ("th", "T"), ("ck", "k"),
            ("ng", "N"), ("ee", "E"), ("oo", "O"), ("ay", "A"))
PHONES = (SEPARATOR,) + tuple("abcdefghijklmnopqrstuvwxyz") + ("L", "S", "C", "T", "N", "E", "O", "A")
AUDIO_PAD_ID = 0
PHONE_TO_ID = {p: i + 1 for i, p in enumerate(PHONES)}
ID_TO_PHONE = {i + 1: p for i, p in enumerate(PHONES)}
AUDIO_VOCAB_SIZE = 1 + len(PHONES)  # 36

# Fixed confusability table used by the corpus noise model. Phones
# mapping to themselves are never altered by substitution noise.
CONFUSABLE = {
    "a": "o", "o": "a", "e": "u", "u": "e", "i": "E",
    "y": "l", "l": "y", "f": "p", "p": "f", "c": "k", "k": "c",
    "b": "d", "d": "b", "t": "d", "s": "z", "z": "s",
    "m": "n", "n": "m", "g": "k",
    "h": "h", "j": "j", "q": "q", "r": "r", "v": "v", "w": "w", "x": "x",
    "L": "l", "S": "s", "C": "k", "T": "t", "N": "n", "E": "i", "O": "o", "A": "a",
    SEPARATOR: SEPARATOR,
}

EXCEPTION_RULES = ("c_k", "s_z", "ll_y", "silent_k", "ph_f", "ei_swap", "silent_b", "acronym")
RULE_CATEGORY = {
    "c_k": "named-entity-like",
    "ll_y": "named-entity-like",
    "silent_k": "named-entity-like",
    "s_z": "domain-word-like",
    "ph_f": "domain-word-like",
    "ei_swap": "domain-word-like",
    "silent_b": "domain-word-like",
    "acronym": "acronym-like",
}
# Spoken letter names used by the acronym rule; restricted to letters
# whose names are spellable with the regular rule tables.
LETTER_NAMES = {
    "b": "bee", "c": "see", "d": "dee", "e": "ee", "g": "gee", "j": "jay",
    "k": "kay", "p": "pee", "t": "tee", "v": "vee", "z": "zee",
}

DEFAULT_RULE_COUNTS = {
    "c_k": 14, "s_z": 12, "ll_y": 9, "silent_k": 7,
    "ph_f": 6, "ei_swap": 5, "silent_b": 3, "acronym": 4,
}


def _parse(word: str) -> list[tuple[str, int, int]]:
    """Left-to-right rule application; returns (phone, start, length) items."""
    out = []
    i = 0
    while i < len(word):
        if word[i] == " ":
            out.append((SEPARATOR, i, 1))
            i += 1
            continue
        two = word[i:i + 2]
        for graph, phone in DIGRAPHS:
            if two == graph:
                out.append((phone, i, 2))
                i += 2
                break
        else:
            c = word[i]
            if "a" <= c <= "z":
                out.append((c, i, 1))
            i += 1
    return out


def regular_g2p(text: str) -> list[str]:
    """Deterministic pronunciation under the regular rules; total function.

    Multi-word text gets the separator phone between words; characters
    outside a-z and space are skipped.
    """
    return [p for p, _, _ in _parse(" ".join(text.lower().split()))]


def irregular_g2p(word: str, exception_id: str) -> tuple[list[str], str]:
    """Pronunciation under one exception rule, plus the back-spelling.

    The back-spelling is the orthography the regular rules assign to the
    returned phones; it is what a regular-rules recognizer writes when it
    hears this word. Raises GenerationError when the rule does not apply
    to the word's shape or would not change its pronunciation.
    """
    word = word.lower()
    parse = _parse(word)
    phones = [p for p, _, _ in parse]

    if exception_id == "c_k":
        hit = next((n for n, (p, _, ln) in enumerate(parse) if p == "c" and ln == 1), None)
        if hit is None:
            raise GenerationError(f"{word!r} has no plain c for rule c_k")
        out = list(phones)
        out[hit] = "k"
        i = parse[hit][1]
        back = word[:i] + "k" + word[i + 1:]
    elif exception_id == "s_z":
        hit = next((n for n, (p, _, ln) in enumerate(parse) if p == "s" and ln == 1), None)
        if hit is None:
            raise GenerationError(f"{word!r} has no plain s for rule s_z")
        out = list(phones)
        out[hit] = "z"
        i = parse[hit][1]
        back = word[:i] + "z" + word[i + 1:]
    elif exception_id == "ll_y":
        hit = next((n for n, (p, _, ln) in enumerate(parse) if p == "L" and ln == 2), None)
        if hit is None:
            raise GenerationError(f"{word!r} has no ll digraph for rule ll_y")
        out = list(phones)
        out[hit] = "y"
        i = parse[hit][1]
        back = word[:i] + "y" + word[i + 2:]
    elif exception_id == "silent_k":
        if not (word.startswith("kn") and len(word) > 2):
            raise GenerationError(f"{word!r} does not start with kn for rule silent_k")
        out = phones[1:]
        back = word[1:]
    elif exception_id == "ph_f":
        hit = next((n for n in range(len(parse) - 1)
                    if parse[n][0] == "p" and parse[n + 1][0] == "h"
                    and parse[n + 1][1] == parse[n][1] + 1), None)
        if hit is None:
            raise GenerationError(f"{word!r} has no ph cluster for rule ph_f")
        out = phones[:hit] + ["f"] + phones[hit + 2:]
        i = parse[hit][1]
        back = word[:i] + "f" + word[i + 2:]
    elif exception_id == "ei_swap":
        hit = next((n for n in range(len(parse) - 1)
                    if parse[n][0] == "e" and parse[n][2] == 1
                    and parse[n + 1][0] == "i" and parse[n + 1][1] == parse[n][1] + 1), None)
        if hit is None:
            raise GenerationError(f"{word!r} has no plain ei for rule ei_swap")
        out = list(phones)
        out[hit], out[hit + 1] = "i", "e"
        i = parse[hit][1]
        back = word[:i] + "ie" + word[i + 2:]
    elif exception_id == "silent_b":
        if not (word.endswith("mb") and len(word) > 2 and parse[-1][0] == "b"):
            raise GenerationError(f"{word!r} does not end with mb for rule silent_b")
        out = phones[:-1]
        back = word[:-1]
    elif exception_id == "acronym":
        if not (2 <= len(word) <= 4 and all(c in LETTER_NAMES for c in word)):
            raise GenerationError(f"{word!r} is not spellable letter-wise for rule acronym")
        back = " ".join(LETTER_NAMES[c] for c in word)
        out = regular_g2p(back)
    else:
        raise GenerationError(f"unknown exception rule {exception_id!r}")

    if out == phones:
        raise GenerationError(f"rule {exception_id} does not change the pronunciation of {word!r}")
    if regular_g2p(back) != out:
        raise GenerationError(f"back-spelling {back!r} is inconsistent for {word!r} under {exception_id}")
    return out, back


# -- lexicon ----------------------------------------------------------------


@dataclass(frozen=True)
class LexEntry:
    word: str  # orthographic surface
    phonemes: tuple[str, ...]  # pronunciation actually spoken
    irregular: bool  # True when an exception rule applies
    category: str  # regular | named-entity-like | domain-word-like | acronym-like
    back_spelling: str | None  # regular-rules orthography of the phones (irregular only)
    rule: str | None = None  # exception rule id (not serialized)


@dataclass(frozen=True)
class Lexicon:
    entries: tuple[LexEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "_by_word", {e.word: e for e in self.entries})

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, word: str) -> LexEntry:
        return self._by_word[word]

    def __contains__(self, word: str) -> bool:
        return word in self._by_word

    def regular_words(self) -> list[str]:
        return [e.word for e in self.entries if not e.irregular]

    def irregular_words(self) -> list[str]:
        return [e.word for e in self.entries if e.irregular]


def _edit_distance(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


_CONSONANTS = "bcdfghjklmnpqrstvwxyz"
_VOWELS = "aeiou"
_ONSET_DIGRAPHS = ("sh", "ch", "th", "ll")
_NUCLEUS_DIGRAPHS = ("ee", "oo", "ay")


def _random_syllable(rng: Rng) -> str:
    if rng.uniform() < 0.12:
        onset = _ONSET_DIGRAPHS[rng.randint(len(_ONSET_DIGRAPHS))]
    else:
        onset = _CONSONANTS[rng.randint(len(_CONSONANTS))]
    if rng.uniform() < 0.15:
        nucleus = _NUCLEUS_DIGRAPHS[rng.randint(len(_NUCLEUS_DIGRAPHS))]
    else:
        nucleus = _VOWELS[rng.randint(len(_VOWELS))]
    r = rng.uniform()
    if r < 0.45:
        coda = ""
    elif r < 0.49:
        coda = "ng"
    else:
        coda = _CONSONANTS[rng.randint(len(_CONSONANTS))]
    return onset + nucleus + coda


def _has_bad_doubles(word: str) -> bool:
    """Doubled letters other than the ll digraph make back-spellings fragile."""
    for i in range(len(word) - 1):
        if word[i] == word[i + 1] and word[i:i + 2] not in ("ll", "ee", "oo"):
            return True
    return False


def _random_word(rng: Rng) -> str:
    n = 2 + rng.randint(2)
    return "".join(_random_syllable(rng) for _ in range(n))


def _irregular_candidate(rule: str, rng: Rng) -> str:
    """Draw a word shaped so the exception rule applies to it."""
    if rule == "acronym":
        letters = list(LETTER_NAMES)
        rng.shuffle(letters)
        return "".join(letters[:2 + rng.randint(2)])
    word = _random_word(rng)
    v = _VOWELS[rng.randint(len(_VOWELS))]
    if rule == "c_k":
        word = "c" + v + word.replace("c", "t").replace("k", "t")
    elif rule == "s_z":
        word = "s" + v + word.replace("s", "t").replace("z", "t").replace("h", "m")
    elif rule == "ll_y":
        word = "ll" + v + word.replace("l", "r").replace("y", "r")
    elif rule == "silent_k":
        word = "kn" + v + word.replace("k", "t").replace("g", "t")
    elif rule == "ph_f":
        word = "ph" + v + word.replace("p", "t").replace("h", "m").replace("f", "t")
    elif rule == "ei_swap":
        c = _CONSONANTS[rng.randint(len(_CONSONANTS))]
        end = _CONSONANTS[rng.randint(len(_CONSONANTS))]
        while end == "e":
            end = _CONSONANTS[rng.randint(len(_CONSONANTS))]
        word = word[:3].replace("e", "a").replace("i", "o") + c + "ei" + end
    elif rule == "silent_b":
        word = word.replace("b", "t").replace("m", "n") + v + "mb"
    return word


def gen_lexicon(n_regular: int = 600, rule_counts: dict[str, int] | None = None,
                seed: int = 42) -> Lexicon:
    """Regular + irregular lexicon with well-separated pronunciations.

    All pronunciations are pairwise edit distance >= 2 and back-spellings
    never collide with lexicon words, so each word is recoverable from
    one-phone-noisy audio and each irregular back-spelling is unambiguous.
    """
    rule_counts = dict(DEFAULT_RULE_COUNTS if rule_counts is None else rule_counts)
    for rule in rule_counts:
        if rule not in EXCEPTION_RULES:
            raise GenerationError(f"unknown exception rule {rule!r}")
    rng = Rng(derive_seed("lexicon", seed))
    words: set[str] = set()
    prons: list[tuple[str, ...]] = []
    by_len: dict[int, list[tuple[str, ...]]] = {}

    def spaced(pron: tuple[str, ...]) -> bool:
        for ln in (len(pron) - 1, len(pron), len(pron) + 1):
            for other in by_len.get(ln, ()):
                if _edit_distance(pron, other) < 2:
                    return False
        return True

    def admit(pron: tuple[str, ...]) -> None:
        prons.append(pron)
        by_len.setdefault(len(pron), []).append(pron)

    entries: list[LexEntry] = []
    tries = 0
    while sum(1 for e in entries if not e.irregular) < n_regular:
        tries += 1
        if tries > 200 * n_regular:
            raise GenerationError("could not place enough regular words; relax the constraints")
        word = _random_word(rng)
        if word in words or _has_bad_doubles(word):
            continue
        pron = tuple(regular_g2p(word))
        if not pron or not spaced(pron):
            continue
        words.add(word)
        admit(pron)
        entries.append(LexEntry(word, pron, False, "regular", None))

    for rule, count in rule_counts.items():
        placed = 0
        tries = 0
        while placed < count:
            tries += 1
            if tries > 500 * max(count, 1):
                raise GenerationError(f"could not place {count} words for rule {rule}")
            word = _irregular_candidate(rule, rng)
            if word in words or _has_bad_doubles(word):
                continue
            try:
                phones, back = irregular_g2p(word, rule)
            except GenerationError:
                continue
            pron = tuple(phones)
            if back in words or not spaced(pron):
                continue
            words.add(word)
            admit(pron)
            entries.append(LexEntry(word, pron, True, RULE_CATEGORY[rule], back, rule))
            placed += 1

    return Lexicon(entries=tuple(entries))


def save_lexicon(path: str | Path, lexicon: Lexicon) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in lexicon.entries:
            f.write(json.dumps({"word": e.word, "phonemes": list(e.phonemes),
                                "irregular": e.irregular, "category": e.category,
                                "back_spelling": e.back_spelling}) + "\n")


def load_lexicon(path: str | Path) -> Lexicon:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            o = json.loads(line)
            entries.append(LexEntry(o["word"], tuple(o["phonemes"]), o["irregular"],
                                    o["category"], o["back_spelling"]))
    return Lexicon(entries=tuple(entries))


# -- corpora ----------------------------------------------------------------


@dataclass(frozen=True)
class Utterance:
    id: str  # split-scoped identifier, e.g. "test-00017"
    audio: tuple[int, ...]  # noisy phone ids
    text: str  # reference transcript (normalized words)
    new_words: tuple[str, ...]  # irregular words contained in the text


def apply_noise(phones: Sequence[str], rng: Rng,
                dup_prob: float = 0.15, sub_prob: float = 0.05) -> list[str]:
    """Substitution-then-duplication noise; separators pass through untouched.

    Exactly two rng draws per non-separator phone, so the stream can be
    re-derived span by span from the same seed.
    """
    out = []
    for ph in phones:
        if ph == SEPARATOR:
            out.append(ph)
            continue
        sub_draw = rng.uniform()
        dup_draw = rng.uniform()
        if sub_draw < sub_prob and CONFUSABLE[ph] != ph:
            ph = CONFUSABLE[ph]
        out.append(ph)
        if dup_draw < dup_prob:
            out.append(ph)
    return out


def noisy_word_spans(lexicon: Lexicon, words: Sequence[str], rng: Rng,
                     dup_prob: float = 0.15, sub_prob: float = 0.05) -> list[list[int]]:
    """Per-word noisy audio spans (ids), in word order; same rng stream as
    the corpus generator so spans reconstruct stored utterance audio."""
    spans = []
    for w in words:
        phones = apply_noise(lexicon[w].phonemes, rng, dup_prob, sub_prob)
        spans.append([PHONE_TO_ID[p] for p in phones])
    return spans


def audio_rng(seed: int, utt_id: str) -> Rng:
    return Rng(derive_seed("audio", seed, utt_id))


def assemble_spans(spans: list[list[int]]) -> tuple[int, ...]:
    """Join word spans with the separator phone into one audio id tuple."""
    sep = PHONE_TO_ID[SEPARATOR]
    audio: list[int] = []
    for i, span in enumerate(spans):
        if i:
            audio.append(sep)
        audio.extend(span)
    return tuple(audio)


def gen_corpus(lexicon: Lexicon, n_train: int, n_test: int,
               words_per_utt: tuple[int, int] = (3, 7),
               dup_prob: float = 0.15, sub_prob: float = 0.05,
               seed: int = 42) -> tuple[list[Utterance], list[Utterance]]:
    """Train split uses only regular words; every test utterance carries
    exactly one irregular word, round-robin so each occurs >= 2 times."""
    regular = lexicon.regular_words()
    irregular = lexicon.irregular_words()
    lo, hi = words_per_utt
    if lo < 1 or hi < lo:
        raise GenerationError(f"bad words_per_utt range {words_per_utt}")
    if not regular:
        raise GenerationError("lexicon has no regular words")
    if n_test and not irregular:
        raise GenerationError("lexicon has no irregular words for the test split")
    if n_test and n_test < 2 * len(irregular):
        raise GenerationError(f"{n_test} test utterances cannot cover "
                              f"{len(irregular)} irregular words twice each")

    def pick_regular(rng: Rng) -> str:
        return regular[rng.randint(len(regular))]

    train: list[Utterance] = []
    rng = Rng(derive_seed("text", seed, "train"))
    for i in range(n_train):
        utt_id = f"train-{i:05d}"
        n = lo + rng.randint(hi - lo + 1)
        words = [pick_regular(rng) for _ in range(n)]
        spans = noisy_word_spans(lexicon, words, audio_rng(seed, utt_id), dup_prob, sub_prob)
        train.append(Utterance(utt_id, assemble_spans(spans), " ".join(words), ()))

    test: list[Utterance] = []
    rng = Rng(derive_seed("text", seed, "test"))
    schedule: list[str] = []
    while len(schedule) < n_test:
        block = list(irregular)
        rng.shuffle(block)
        schedule.extend(block)
    for i in range(n_test):
        utt_id = f"test-{i:05d}"
        n = lo + rng.randint(hi - lo + 1)
        words = [pick_regular(rng) for _ in range(n)]
        slot = rng.randint(n)
        words[slot] = schedule[i]
        spans = noisy_word_spans(lexicon, words, audio_rng(seed, utt_id), dup_prob, sub_prob)
        test.append(Utterance(utt_id, assemble_spans(spans), " ".join(words), (schedule[i],)))

    return train, test


def save_corpus(path: str | Path, utterances: Iterable[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in utterances:
            f.write(json.dumps({"id": u.id, "audio": list(u.audio),
                                "text": u.text, "new_words": list(u.new_words)}) + "\n")


def load_corpus(path: str | Path) -> list[Utterance]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            o = json.loads(line)
            out.append(Utterance(o["id"], tuple(o["audio"]), o["text"], tuple(o["new_words"])))
    return out


def default_dataset(out_dir: str | Path, seed: int = 42,
                    n_regular: int = 600, rule_counts: dict[str, int] | None = None,
                    n_train: int = 8000, n_test: int = 400) -> dict[str, Path]:
    """Generate and write the standard dataset; returns the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lexicon = gen_lexicon(n_regular, rule_counts, seed)
    train, test = gen_corpus(lexicon, n_train, n_test, seed=seed)
    paths = {"lexicon": out / "lexicon.jsonl",
             "train": out / "train.jsonl",
             "test": out / "test.jsonl"}
    save_lexicon(paths["lexicon"], lexicon)
    save_corpus(paths["train"], train)
    save_corpus(paths["test"], test)
    return paths
