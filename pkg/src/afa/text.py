"""Tokenization shared by the lexical metrics and the hashing embedder."""

from __future__ import annotations

import re

_PUNCT = re.compile(r"[^\w\s]", flags=re.UNICODE)

# Function words ignored when picking persona "content" words.
STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because been
    before being below between both but by can could did do does doing down during
    each few for from further had has have having he her here hers herself him
    himself his how i if in into is it its itself just me more most my myself no nor
    not now of off on once only or other our ours ourselves out over own same she
    should so some such than that the their theirs them themselves then there these
    they this those through to too under until up very was we were what when where
    which while who whom why will with would you your yours yourself yourselves
    also who's i'm it's s t
    """.split()
)


def tokenize(text: str) -> list[str]:
    """Lowercase, turn punctuation into spaces and split on whitespace.

    >>> tokenize("Hello, World!")
    ['hello', 'world']
    """
    return _PUNCT.sub(" ", text.lower()).split()


def content_words(text: str) -> list[str]:
    return [t for t in tokenize(text) if t not in STOPWORDS and not t.isdigit()]


def whitespace_tokens(text: str) -> list[str]:
    return text.split()
