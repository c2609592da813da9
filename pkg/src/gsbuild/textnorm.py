"""Transcript normalization: NFKC, uppercasing, numeral expansion, punctuation removal.

Language behaviour lives in TOML profiles under ``gsbuild/profiles``; the
numeral engine only interprets those tables.
"""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

import tomli

UNICODE_VERSION = unicodedata.unidata_version
SHIPPED_LANGUAGES = ("th", "id", "vi")
POSITIONAL_LIMIT = 6
_APOSTROPHES = {"'", "’"}


@dataclass(frozen=True)
class NumeralTable:
    mode: str
    digits: tuple[str, ...]
    places: tuple[str, ...] = ()
    override: dict[str, str] = field(default_factory=dict)
    trailing_one: Optional[str] = None
    teens: tuple[str, ...] = ()
    tens_word: str = ""
    hundred_word: str = ""
    thousand_word: str = ""
    one_hundred: Optional[str] = None
    one_thousand: Optional[str] = None
    zero_tens_joiner: Optional[str] = None
    pad_hundreds_after_thousands: bool = False
    unit_after_tens: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.digits) != 10:
            raise ValueError("numeral table needs exactly ten digit words")
        if self.mode == "positional":
            if len(self.places) < POSITIONAL_LIMIT:
                raise ValueError("positional tables need place words up to 10^5")
        elif self.mode == "grouped":
            if len(self.teens) != 10 or not (self.tens_word and self.hundred_word and self.thousand_word):
                raise ValueError("grouped tables need teens, tens, hundred and thousand words")
        else:
            raise ValueError(f"unknown numeral mode {self.mode!r}")


@dataclass(frozen=True)
class LanguageProfile:
    code: str
    charset: frozenset[int]
    numerals: NumeralTable
    script_has_case: bool
    word_separator: str = " "
    keep_intraword_apostrophe: bool = False
    name: str = ""

    def allows(self, text: str) -> bool:
        return all(ord(c) in self.charset for c in text)


def _parse_ranges(entries: list[str]) -> frozenset[int]:
    points: set[int] = set()
    for entry in entries:
        lo, _, hi = entry.partition("-")
        points.update(range(int(lo, 16), int(hi or lo, 16) + 1))
    if 0x20 not in points:
        raise ValueError("charset must include the space character")
    return frozenset(points)


def profile_from_dict(data: dict) -> LanguageProfile:
    table = dict(data["numerals"])
    for key in ("digits", "places", "teens"):
        if key in table:
            table[key] = tuple(table[key])
    return LanguageProfile(
        code=data["code"],
        name=data.get("name", data["code"]),
        charset=_parse_ranges(data["charset"]),
        numerals=NumeralTable(**table),
        script_has_case=bool(data["script_has_case"]),
        word_separator=data.get("word_separator", " "),
        keep_intraword_apostrophe=bool(data.get("keep_intraword_apostrophe", False)),
    )


def load_profile_file(path: str | Path) -> LanguageProfile:
    with open(path, "rb") as fh:
        return profile_from_dict(tomli.load(fh))


@lru_cache(maxsize=None)
def get_profile(code: str) -> LanguageProfile:
    res = resources.files("gsbuild") / "profiles" / f"{code}.toml"
    if not res.is_file():
        raise KeyError(f"no shipped profile for language {code!r}")
    return profile_from_dict(tomli.loads(res.read_text(encoding="utf-8")))


# -------------------------------------------------------------------- numerals

def _positional(n: int, t: NumeralTable) -> list[str]:
    if n == 0:
        return [t.digits[0]]
    digits = [int(c) for c in reversed(str(n))]
    words = []
    for place in range(len(digits) - 1, -1, -1):
        d = digits[place]
        if d == 0:
            continue
        if place == 0 and d == 1 and n > 9 and t.trailing_one:
            words.append(t.trailing_one)
            continue
        key = f"{place}:{d}"
        words.append(t.override.get(key, t.digits[d] + t.places[place]))
    return words


def _below_thousand(n: int, t: NumeralTable, padded: bool) -> list[str]:
    hundreds, rest = divmod(n, 100)
    tens, units = divmod(rest, 10)
    words: list[str] = []
    if hundreds:
        if hundreds == 1 and t.one_hundred:
            words.append(t.one_hundred)
        else:
            words += [t.digits[hundreds], t.hundred_word]
    elif padded and rest and t.pad_hundreds_after_thousands:
        words += [t.digits[0], t.hundred_word]
    if tens == 1:
        words.append(t.teens[units])
    elif tens >= 2:
        words += [t.digits[tens], t.tens_word]
        if units:
            words.append(t.unit_after_tens.get(str(units), t.digits[units]))
    elif units:
        if words and t.zero_tens_joiner:
            words.append(t.zero_tens_joiner)
        words.append(t.digits[units])
    return words


def _grouped(n: int, t: NumeralTable) -> list[str]:
    if n == 0:
        return [t.digits[0]]
    thousands, rest = divmod(n, 1000)
    words: list[str] = []
    if thousands:
        if thousands == 1 and t.one_thousand:
            words.append(t.one_thousand)
        else:
            words += _below_thousand(thousands, t, padded=False) + [t.thousand_word]
    words += _below_thousand(rest, t, padded=bool(thousands))
    return words


def number_words(digits: str, profile: LanguageProfile) -> list[str]:
    """Words for a digit string; runs longer than six digits are read digit by digit."""
    t = profile.numerals
    if len(digits) > POSITIONAL_LIMIT:
        return [t.digits[int(c)] for c in digits]
    n = int(digits)
    if len(digits) > 1 and digits[0] == "0":
        # leading zeros are spoken, then the remainder positionally
        lead = len(digits) - len(digits.lstrip("0"))
        zeros = [t.digits[0]] * lead
        return zeros + (number_words(digits[lead:], profile) if n else [])
    return _positional(n, t) if t.mode == "positional" else _grouped(n, t)


def expand_numerals(text: str, profile: LanguageProfile, upper: bool = False) -> str:
    """Replace every maximal run of decimal digits with its spoken form.

    Any Unicode decimal digit counts (so Thai digits expand too).  For
    languages written with spaces, the expansion is padded with spaces.
    """
    out: list[str] = []
    i = 0
    while i < len(text):
        if unicodedata.decimal(text[i], None) is None:
            out.append(text[i])
            i += 1
            continue
        j = i
        while j < len(text) and unicodedata.decimal(text[j], None) is not None:
            j += 1
        run = "".join(str(unicodedata.decimal(c)) for c in text[i:j])
        spoken = profile.word_separator.join(number_words(run, profile))
        if upper:
            spoken = spoken.upper()
        if profile.word_separator:
            spoken = f" {spoken} "
        out.append(spoken)
        i = j
    return "".join(out)


# ----------------------------------------------------------------- punctuation

def _is_wordchar(c: str) -> bool:
    return unicodedata.category(c)[0] in "LM"


def strip_punctuation(text: str, keep_intraword_apostrophe: bool = False) -> str:
    out = []
    for i, c in enumerate(text):
        if unicodedata.category(c)[0] not in "PS":
            out.append(c)
        elif (keep_intraword_apostrophe and c in _APOSTROPHES and 0 < i < len(text) - 1
              and _is_wordchar(text[i - 1]) and _is_wordchar(text[i + 1])):
            out.append(c)
    return "".join(out)


# ------------------------------------------------------------------ normalize

def _fold_case(text: str) -> str:
    # uppercasing can emit decomposed sequences; refold until stable
    for _ in range(4):
        folded = unicodedata.normalize("NFKC", text.upper())
        if folded == text:
            break
        text = folded
    return text


def _single_pass(text: str, profile: LanguageProfile) -> str:
    text = unicodedata.normalize("NFKC", text)
    if profile.script_has_case:
        text = _fold_case(text)
    text = expand_numerals(text, profile, upper=profile.script_has_case)
    text = strip_punctuation(text, profile.keep_intraword_apostrophe)
    return " ".join(text.split())


def normalize(text: str, profile: LanguageProfile) -> str:
    """NFKC -> uppercase -> numerals -> punctuation strip -> whitespace collapse.

    Removing punctuation can bring combining marks next to new base
    characters, so the pass is repeated until the output is a fixed point.
    """
    out = _single_pass(text, profile)
    for _ in range(8):
        again = _single_pass(out, profile)
        if again == out:
            return out
        out = again
    return out
