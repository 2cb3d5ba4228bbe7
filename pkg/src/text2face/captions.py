"""Templated face captions and the 40 CelebA attributes they describe.

Rendering follows a fixed sentence order (face shape, facial hair, hair,
features, look, accessories, image quality) so that parsing a rendered
caption recovers the exact attribute vector. Phrases and recognition patterns
live in the versioned ``grammar_v1.txt`` table next to this module.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Mapping

import numpy as np

from .errors import CaptionParseError, DataError

ATTRIBUTES = (
    "5_o_Clock_Shadow", "Arched_Eyebrows", "Attractive", "Bags_Under_Eyes", "Bald",
    "Bangs", "Big_Lips", "Big_Nose", "Black_Hair", "Blond_Hair", "Blurry", "Brown_Hair",
    "Bushy_Eyebrows", "Chubby", "Double_Chin", "Eyeglasses", "Goatee", "Gray_Hair",
    "Heavy_Makeup", "High_Cheekbones", "Male", "Mouth_Slightly_Open", "Mustache",
    "Narrow_Eyes", "No_Beard", "Oval_Face", "Pale_Skin", "Pointy_Nose",
    "Receding_Hairline", "Rosy_Cheeks", "Sideburns", "Smiling", "Straight_Hair",
    "Wavy_Hair", "Wearing_Earrings", "Wearing_Hat", "Wearing_Lipstick",
    "Wearing_Necklace", "Wearing_Necktie", "Young",
)
INDEX = {name: i for i, name in enumerate(ATTRIBUTES)}

HAIR_COLORS = ("Black_Hair", "Blond_Hair", "Brown_Hair", "Gray_Hair")
HAIR_STYLES = ("Straight_Hair", "Wavy_Hair")
# attribute -> attributes it cannot coexist with
CONFLICTS: dict[str, frozenset[str]] = {}


def _exclusive(group: Iterable[str]) -> None:
    group = tuple(group)
    for name in group:
        CONFLICTS[name] = CONFLICTS.get(name, frozenset()) | (frozenset(group) - {name})


def _excludes(name: str, others: Iterable[str]) -> None:
    others = frozenset(others)
    CONFLICTS[name] = CONFLICTS.get(name, frozenset()) | others
    for o in others:
        CONFLICTS[o] = CONFLICTS.get(o, frozenset()) | {name}


_exclusive(HAIR_COLORS)
_exclusive(HAIR_STYLES)
_excludes("Bald", HAIR_COLORS + HAIR_STYLES + ("Bangs", "Receding_Hairline"))
_excludes("No_Beard", ("Goatee",))


class AttributeConflictError(DataError):
    pass


class UnknownAttributeError(DataError):
    def __init__(self, name):
        super().__init__(f"unknown attribute {name!r}; valid names: {', '.join(ATTRIBUTES)}")


def _check_name(name: str) -> None:
    if name not in INDEX:
        raise UnknownAttributeError(name)


@dataclass(frozen=True)
class AttributeVector:
    """Forty binary facial attributes in canonical CelebA order."""

    flags: tuple[bool, ...] = (False,) * len(ATTRIBUTES)

    def __post_init__(self):
        if len(self.flags) != len(ATTRIBUTES):
            raise DataError(f"attribute vector needs {len(ATTRIBUTES)} entries, got {len(self.flags)}")
        object.__setattr__(self, "flags", tuple(bool(f) for f in self.flags))

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "AttributeVector":
        flags = [False] * len(ATTRIBUTES)
        for name in names:
            _check_name(name)
            flags[INDEX[name]] = True
        return cls(tuple(flags))

    @classmethod
    def from_mapping(cls, values: Mapping[str, bool]) -> "AttributeVector":
        return cls.from_names(k for k, v in values.items() if v)

    def __getitem__(self, name: str) -> bool:
        _check_name(name)
        return self.flags[INDEX[name]]

    def names(self) -> list[str]:
        """Set attribute names in canonical order."""
        return [n for n, f in zip(ATTRIBUTES, self.flags) if f]

    def as_array(self) -> np.ndarray:
        return np.array(self.flags, dtype=np.float64)

    def with_flag(self, name: str, value: bool) -> "AttributeVector":
        _check_name(name)
        flags = list(self.flags)
        flags[INDEX[name]] = bool(value)
        return AttributeVector(tuple(flags))

    def conflicts(self) -> list[tuple[str, str]]:
        on = set(self.names())
        return sorted({tuple(sorted((a, b))) for a in on for b in CONFLICTS.get(a, ()) if b in on})

    def validate(self) -> "AttributeVector":
        bad = self.conflicts()
        if bad:
            pairs = ", ".join(f"{a}+{b}" for a, b in bad)
            raise AttributeConflictError(f"conflicting attributes: {pairs}")
        return self


@dataclass(frozen=True)
class Caption:
    text: str
    provenance: str = "parsed"

    def __str__(self):
        return self.text

    def sentences(self) -> list[str]:
        return split_sentences(self.text)


def flip_attribute(attrs: AttributeVector, name: str, value: bool) -> AttributeVector:
    """Set one attribute, clearing whatever it excludes when it is switched on."""
    _check_name(name)
    out = attrs.with_flag(name, value)
    if value:
        for other in CONFLICTS.get(name, ()):
            out = out.with_flag(other, False)
    return out


def random_attributes(rng: np.random.Generator, p: float = 0.25) -> AttributeVector:
    """Draw a valid vector: each attribute switched on with probability p, in random order."""
    attrs = AttributeVector()
    for i in rng.permutation(len(ATTRIBUTES)):
        name = ATTRIBUTES[i]
        if name == "Male":
            continue
        if rng.random() < p:
            attrs = flip_attribute(attrs, name, True)
    return attrs.with_flag("Male", rng.random() < 0.5)


# ---------------------------------------------------------------------------
# grammar table

@dataclass(frozen=True)
class Grammar:
    version: int
    phrases: dict[str, str]
    patterns: dict[str, re.Pattern]


def load_grammar(text: str | None = None) -> Grammar:
    if text is None:
        text = resources.files(__package__).joinpath("grammar_v1.txt").read_text(encoding="utf-8")
    version = None
    phrases, patterns = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if fields[0] == "version":
            version = int(fields[1])
            continue
        if len(fields) != 3:
            raise DataError(f"grammar line {lineno}: expected 3 tab-separated fields")
        key, phrase, pattern = fields
        if not key.startswith("~"):
            _check_name(key)
        phrases[key] = phrase
        patterns[key] = re.compile(pattern, re.IGNORECASE)
    if version is None:
        raise DataError("grammar file has no version line")
    missing = set(ATTRIBUTES) - set(phrases)
    if missing:
        raise DataError(f"grammar lacks attributes: {sorted(missing)}")
    return Grammar(version, phrases, patterns)


GRAMMAR = load_grammar()


def _join_and(items: list[str]) -> str:
    if len(items) <= 1:
        return "".join(items)
    return ", ".join(items[:-1]) + " and " + items[-1]


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"(?<=[.!?])\s+|\n+", text.strip()) if s.strip()]


# ---------------------------------------------------------------------------
# rendering

def render_caption(attrs: AttributeVector, grammar: Grammar = GRAMMAR) -> Caption:
    attrs.validate()
    on = set(attrs.names())
    ph = grammar.phrases
    male = "Male" in on
    noun = ph["Male"] if male else ph["~Female"]
    subj, poss, contr = ("He", "His", "He's") if male else ("She", "Her", "She's")

    def pick(*names):
        return [ph[n] for n in names if n in on]

    out = []

    build = pick("Chubby", "Double_Chin")
    shape = pick("Oval_Face", "High_Cheekbones")
    if shape:
        out.append(f"The {' '.join(build + [noun])} has {_join_and(shape)}.")
    elif build:
        out.append(f"The {noun} has a {' '.join(build)} face.")

    facial = pick("5_o_Clock_Shadow", "Goatee", "Mustache")
    if facial:
        tail = f" with {ph['Sideburns']}" if "Sideburns" in on else ""
        out.append(f"{subj} sports a {_join_and(facial)}{tail}.")
    elif "Sideburns" in on:
        out.append(f"{subj} sports {ph['Sideburns']}.")
    if "No_Beard" in on:
        out.append(f"{subj} has {ph['No_Beard']}.")

    if "Bald" in on:
        out.append(f"{subj} is {ph['Bald']}.")
    style = pick(*HAIR_STYLES)
    color = pick(*HAIR_COLORS)
    bangs = f" with {ph['Bangs']}" if "Bangs" in on else ""
    if style:
        which = f" which is {color[0]} in colour" if color else ""
        out.append(f"{subj} has {style[0]} hair{which}{bangs}.")
    elif color:
        out.append(f"{poss} hair is {color[0]} in colour{bangs}.")
    elif bangs:
        out.append(f"{subj} has {ph['Bangs']}.")
    if "Receding_Hairline" in on:
        out.append(f"{subj} has a {ph['Receding_Hairline']}.")

    items = pick("Big_Lips")
    if "Big_Nose" in on and "Pointy_Nose" in on:
        items.append("big pointy nose")
    else:
        items += pick("Big_Nose", "Pointy_Nose")
    items += pick("Narrow_Eyes", "Bags_Under_Eyes")
    if "Arched_Eyebrows" in on and "Bushy_Eyebrows" in on:
        brows = "bushy arched eyebrows"
    else:
        brows = "".join(pick("Arched_Eyebrows", "Bushy_Eyebrows"))
    mouth = f"a {ph['Mouth_Slightly_Open']}" if "Mouth_Slightly_Open" in on else ""
    if items or brows:
        body = _join_and(items) if items else brows
        if items and brows:
            body += f" with {brows}"
        if mouth:
            body += f" and {mouth}"
        out.append(f"{subj} has {body}.")
    elif mouth:
        out.append(f"{subj} has {mouth}.")

    adjs = pick("Young", "Attractive")
    looks = pick("Pale_Skin", "Rosy_Cheeks", "Heavy_Makeup")
    smiling = "Smiling" in on
    if looks:
        lead = " ".join(adjs + [noun])
        if smiling:
            lead = f"{ph['Smiling']}, {lead}" if adjs else f"{ph['Smiling']} {lead}"
        out.append(f"The {lead} has {_join_and(looks)}.")
    elif smiling:
        out.append(f"The {' '.join(adjs + [noun])} is {ph['Smiling']}.")
    elif adjs:
        out.append(f"The {noun} looks {_join_and(adjs)}.")

    worn = pick("Eyeglasses", "Wearing_Hat", "Wearing_Earrings", "Wearing_Necklace",
                "Wearing_Necktie", "Wearing_Lipstick")
    if worn:
        out.append(f"{contr} wearing {_join_and(worn)}.")

    if "Blurry" in on:
        out.append(f"The photo of the {noun} is {ph['Blurry']}.")

    if not out:
        out.append(f"The {noun} {ph['~Ordinary']}.")
    return Caption(" ".join(out), provenance="rendered")


# ---------------------------------------------------------------------------
# parsing

def parse_caption_verbose(text, grammar: Grammar = GRAMMAR) -> tuple[AttributeVector, list[str]]:
    """Parse a caption, returning the attributes and the unrecognized sentences."""
    text = str(text)
    if not text.strip():
        raise CaptionParseError("empty caption")
    found: set[str] = set()
    unrecognized = []
    male_hits = female_hits = 0
    recognized_any = False
    for sentence in split_sentences(text):
        hit = False
        for key, pattern in grammar.patterns.items():
            if not pattern.search(sentence):
                continue
            if key == "Male":
                male_hits += 1
            elif key == "~Female":
                female_hits += 1
            elif key == "~Ordinary":
                hit = True
            else:
                found.add(key)
                hit = True
        if hit:
            recognized_any = True
        else:
            unrecognized.append(sentence)
    if not recognized_any:
        raise CaptionParseError(f"no recognizable attribute phrase in caption: {text!r}")
    if male_hits > female_hits:
        found.add("Male")
    return AttributeVector.from_names(found), unrecognized


def parse_caption(text) -> AttributeVector:
    return parse_caption_verbose(text)[0]
