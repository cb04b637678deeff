"""Small script- and stopword-based language guesser.

Good enough to tell English news text from other languages; it returns
``None`` whenever it is not confident, and callers treat that as "keep".
"""

from __future__ import annotations

import re
import unicodedata
from collections import Counter

_SCRIPT_TAGS = {
    "CYRILLIC": "ru",
    "ARABIC": "ar",
    "CJK": "zh",
    "HIRAGANA": "ja",
    "KATAKANA": "ja",
    "HANGUL": "ko",
    "GREEK": "el",
    "HEBREW": "he",
    "DEVANAGARI": "hi",
    "THAI": "th",
    "BENGALI": "bn",
    "TAMIL": "ta",
    "GEORGIAN": "ka",
    "ARMENIAN": "hy",
}

_STOPWORDS = {
    "en": "the of and to in is was for on that with as by at from are were it this be has have after over its "
          "their they he she his her will said who which not been an".split(),
    "fr": "le la les des du de et est dans une un pour que qui sur au aux par pas ce cette sont avec il elle "
          "été ont".split(),
    "de": "der die das und ist nicht ein eine mit den dem des von zu im auf für sich auch wurde sind bei "
          "nach".split(),
    "es": "el la los las de del y que en un una por con para es se su al lo como más fue han sus".split(),
    "it": "il lo la gli le di del della che e un una per con non sono nel alla è dei delle".split(),
    "pt": "o a os as de do da dos das e que em um uma para com não por se mais foi são na no".split(),
    "nl": "de het een en van is dat op te zijn met voor niet aan er ook door werd naar".split(),
}

_CUE_CHARS = {
    "de": "äöüß",
    "fr": "àâçèéêëîïôûœ",
    "es": "ñ¿¡áíóú",
    "pt": "ãõç",
    "it": "àèìòù",
    "nl": "ĳ",
}

_WORD = re.compile(r"[^\W\d_]+", re.UNICODE)


def _script(ch: str) -> str:
    try:
        name = unicodedata.name(ch)
    except ValueError:
        return "UNKNOWN"
    first = name.split(" ", 1)[0]
    if first == "CJK":
        return "CJK"
    return first


def detect_language(text: str | None) -> str | None:
    """Best-guess primary language subtag of ``text`` or ``None`` if unsure."""
    if not text:
        return None
    letters = [c for c in text if c.isalpha()]
    if len(letters) < 3:
        return None
    scripts = Counter(_script(c) for c in letters)
    script, count = scripts.most_common(1)[0]
    if script != "LATIN" and count / len(letters) > 0.5:
        return _SCRIPT_TAGS.get(script, f"und-{script.lower()}")

    words = [w.lower() for w in _WORD.findall(text)]
    scores: dict[str, float] = {}
    for lang, stop in _STOPWORDS.items():
        stopset = set(stop)
        scores[lang] = float(sum(1 for w in words if w in stopset))
    lowered = text.lower()
    for lang, cues in _CUE_CHARS.items():
        scores[lang] += 0.75 * sum(lowered.count(c) for c in cues)

    ranked = sorted(scores.items(), key=lambda kv: kv[1], reverse=True)
    (best, top), (_, second) = ranked[0], ranked[1]
    if top <= 0 or top == second:
        return None
    return best


def matches(detected: str, wanted: str) -> bool:
    return detected.split("-", 1)[0].lower() == wanted.split("-", 1)[0].lower()
