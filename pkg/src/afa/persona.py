"""Structured user personas and their turn-by-turn synchronisation."""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Protocol

from .errors import CorruptStore, ExtractionFailed

logger = logging.getLogger(__name__)

EMPTY_PERSONA = "No persona information available."


class Category(str, enum.Enum):
    DEMOGRAPHICS = "Demographics"
    CAREER = "Career"
    MOTIVATIONS_VALUES = "MotivationsValues"
    DECISION_STYLE = "DecisionStyle"
    PREFERENCES = "Preferences"
    EMOTIONAL_TRIGGERS = "EmotionalTriggers"


_CATEGORY_ORDER = {c: i for i, c in enumerate(Category)}


class Provenance(str, enum.Enum):
    ONBOARDING = "Onboarding"
    SYNCHRONIZED = "Synchronized"


@dataclass(frozen=True)
class PersonaAttribute:
    category: Category
    key: str
    value: str
    provenance: Provenance = Provenance.SYNCHRONIZED
    updated_at_turn: int = 0

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        key = self.key.strip().lower()
        if not key:
            raise ValueError("attribute key must be non-empty")
        object.__setattr__(self, "key", key)

    @property
    def slot(self) -> tuple[Category, str]:
        return self.category, self.key

    def to_dict(self) -> dict:
        return {
            "category": self.category.value,
            "key": self.key,
            "value": self.value,
            "provenance": self.provenance.value,
            "updated_at_turn": self.updated_at_turn,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PersonaAttribute":
        return cls(
            Category(d["category"]),
            d["key"],
            d["value"],
            Provenance(d.get("provenance", Provenance.SYNCHRONIZED.value)),
            int(d.get("updated_at_turn", 0)),
        )


@dataclass
class PersonaProfile:
    user_id: str
    attributes: list[PersonaAttribute] = field(default_factory=list)
    free_text: str | None = None

    def __post_init__(self):
        slots = [a.slot for a in self.attributes]
        if len(slots) != len(set(slots)):
            raise ValueError(f"duplicate (category, key) in profile {self.user_id!r}")

    def get(self, category: Category | str, key: str) -> PersonaAttribute | None:
        slot = (Category(category), key.strip().lower())
        return next((a for a in self.attributes if a.slot == slot), None)

    def is_empty(self) -> bool:
        return not self.attributes and not (self.free_text and self.free_text.strip())

    def copy(self) -> "PersonaProfile":
        return PersonaProfile(self.user_id, list(self.attributes), self.free_text)

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "free_text": self.free_text,
            "attributes": [a.to_dict() for a in self.attributes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PersonaProfile":
        return cls(
            str(d["user_id"]),
            [PersonaAttribute.from_dict(a) for a in d.get("attributes", [])],
            d.get("free_text"),
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PersonaProfile":
        text = Path(path).read_text(encoding="utf-8")
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise CorruptStore(f"malformed profile {path}", len(text[: exc.pos].encode())) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptStore(f"malformed profile {path}: {exc!r}") from exc


# -- extraction ----------------------------------------------------------

_VALUE = r"([^.,;!?]+?)(?=\s+(?:and|but|so|because|while)\b|[.,;!?]|$)"

# (pattern, category, key); order matters only for overlapping matches
_PATTERNS: list[tuple[re.Pattern[str], Category, str]] = [
    (re.compile(r"\bi(?: am|'m) (\d{1,3}) years? old\b"), Category.DEMOGRAPHICS, "age"),
    (re.compile(r"\bi work as (?:an? |the )?" + _VALUE), Category.CAREER, "occupation"),
    (re.compile(r"\bi(?: am|'m) (?:an? )" + _VALUE), Category.CAREER, "occupation"),
    (re.compile(r"\bi (?:love|like) " + _VALUE), Category.PREFERENCES, "likes"),
    (re.compile(r"\bi (?:hate|dislike) " + _VALUE), Category.PREFERENCES, "dislikes"),
    (re.compile(r"\bmy goal is (?:to )?" + _VALUE), Category.MOTIVATIONS_VALUES, "goal"),
]

_MAX_VALUE_WORDS = 6


def rule_based_extract(query: str) -> list[PersonaAttribute]:
    """Pattern-table extractor used when no LLM is configured.

    >>> [(a.category.value, a.key, a.value) for a in rule_based_extract("I love jazz and I work as a nurse")]
    [('Preferences', 'likes', 'jazz'), ('Career', 'occupation', 'nurse')]
    """
    text = " ".join(query.lower().split())
    found: list[tuple[int, PersonaAttribute]] = []
    taken: list[tuple[int, int]] = []
    for pattern, category, key in _PATTERNS:
        for m in pattern.finditer(text):
            span = m.span()
            if any(span[0] < hi and lo < span[1] for lo, hi in taken):
                continue
            value = " ".join(m.group(1).split()[:_MAX_VALUE_WORDS]).strip()
            if not value:
                continue
            taken.append(span)
            found.append((span[0], PersonaAttribute(category, key, value)))
    found.sort(key=lambda item: item[0])
    # one value per slot per query: the last mention wins
    by_slot: dict[tuple[Category, str], PersonaAttribute] = {}
    for _, attr in found:
        by_slot.pop(attr.slot, None)
        by_slot[attr.slot] = attr
    return list(by_slot.values())


class Extractor(Protocol):
    def __call__(self, query: str) -> list[PersonaAttribute]: ...


class LlmExtractor:
    """Ask a chat backend for a JSON list of ``{"category", "key", "value"}`` objects."""

    PROMPT = (
        "Extract any new personal attributes the user reveals about themselves in the message "
        "below. Use only these categories: {categories}. Reply with a JSON list of objects with "
        'keys "category", "key" (a short slot name) and "value"; reply [] if there are none.\n\n'
        "Message: {query}"
    )

    def __init__(self, backend, model_name: str = ""):
        self.backend = backend
        self.model_name = model_name

    def __call__(self, query: str) -> list[PersonaAttribute]:
        from .backends import ChatMessage, ChatRequest

        prompt = self.PROMPT.format(categories=", ".join(c.value for c in Category), query=query)
        raw = self.backend.complete(ChatRequest([ChatMessage("user", prompt)], model_name=self.model_name))
        return parse_extraction(raw)


def parse_extraction(raw: str) -> list[PersonaAttribute]:
    text = raw.strip()
    if text.startswith("```"):
        text = text.strip("`")
        text = text.split("\n", 1)[1] if "\n" in text else ""
    try:
        items = json.loads(text)
        if not isinstance(items, list):
            raise TypeError("expected a JSON list")
        return [
            PersonaAttribute(Category(item["category"]), str(item["key"]), str(item["value"]).strip())
            for item in items
        ]
    except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
        raise ExtractionFailed(f"malformed extractor output: {exc}") from exc


def extract_attributes(query: str, extractor: Extractor = rule_based_extract) -> list[PersonaAttribute]:
    if not query or not query.strip():
        raise ValueError("query must be non-empty")
    return extractor(query)


# -- merge / render --------------------------------------------------------


def merge(profile: PersonaProfile, new_attrs: Iterable[PersonaAttribute], turn_index: int) -> PersonaProfile:
    """Append attributes with a novel (category, key); replace the value of existing ones.

    Returns a new profile; the input is not modified.
    """
    attrs = list(profile.attributes)
    index = {a.slot: i for i, a in enumerate(attrs)}
    for new in new_attrs:
        stamped = replace(new, provenance=Provenance.SYNCHRONIZED, updated_at_turn=turn_index)
        if new.slot in index:
            attrs[index[new.slot]] = stamped
        else:
            index[new.slot] = len(attrs)
            attrs.append(stamped)
    return PersonaProfile(profile.user_id, attrs, profile.free_text)


def attribute_line(attr: PersonaAttribute) -> str:
    return f"{attr.category.value}.{attr.key}: {attr.value}"


def render_persona(profile: PersonaProfile | None) -> str:
    if profile is None or profile.is_empty():
        return EMPTY_PERSONA
    lines = []
    if profile.free_text and profile.free_text.strip():
        lines.append(profile.free_text.strip())
    ordered = sorted(profile.attributes, key=lambda a: (_CATEGORY_ORDER[a.category], a.key))
    lines.extend(attribute_line(a) for a in ordered)
    return "\n".join(lines)


def persona_attribute_texts(persona_text: str) -> list[str]:
    """Split a narrative persona into attribute-sized statements (one per sentence)."""
    parts = re.split(r"(?<=[.;!?])\s+|\n+", persona_text)
    return [p.strip() for p in parts if p.strip() and re.search(r"\w", p)]


def onboarding_profile(user_id: str, persona_text: str | None) -> PersonaProfile:
    return PersonaProfile(user_id, [], persona_text or None)


class ProfileStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path_for(self, user_id: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in user_id)
        return self.root / f"{safe}.json"

    def get(self, user_id: str) -> PersonaProfile:
        path = self.path_for(user_id)
        return PersonaProfile.load(path) if path.exists() else PersonaProfile(user_id)

    def put(self, profile: PersonaProfile) -> None:
        profile.save(self.path_for(profile.user_id))
