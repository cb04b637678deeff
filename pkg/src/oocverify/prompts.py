"""Versioned prompt templates and the prompt document model."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from string import Template
from typing import Any, Union


@dataclass(frozen=True)
class TextPart:
    content: str

    def to_dict(self) -> dict[str, str]:
        return {"type": "text", "content": self.content}


@dataclass(frozen=True)
class ImagePart:
    """Reference to an image. Only the digest takes part in serialization."""

    ref: str
    sha256: str
    data: bytes | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict[str, str]:
        return {"type": "image", "sha256": self.sha256}


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class PromptDocument:
    system_text: str
    parts: tuple[Part, ...]
    template_id: str
    template_version: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "template_id": self.template_id,
            "template_version": self.template_version,
            "system": self.system_text,
            "parts": [p.to_dict() for p in self.parts],
        }

    def serialize(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")

    @property
    def text(self) -> str:
        return "\n".join(p.content for p in self.parts if isinstance(p, TextPart))

    @property
    def images(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]

    def with_suffix(self, text: str) -> "PromptDocument":
        return PromptDocument(self.system_text, self.parts + (TextPart(text),), self.template_id, self.template_version)


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    version: str
    system: str
    user: Template

    def render(self, **values: str) -> tuple[str, str]:
        return self.system, self.user.substitute(values)


def parse_template(text: str) -> PromptTemplate:
    """Parse the ``@template/@version/@system/@user`` template file format."""
    meta: dict[str, str] = {}
    sections: dict[str, list[str]] = {}
    current: list[str] | None = None
    for line in text.splitlines():
        if line.startswith("@template ") or line.startswith("@version "):
            key, _, value = line[1:].partition(" ")
            meta[key] = value.strip()
        elif line.strip() in ("@system", "@user"):
            current = sections.setdefault(line.strip()[1:], [])
        elif current is not None:
            current.append(line)
    missing = {"template", "version"} - meta.keys() | {"system", "user"} - sections.keys()
    if missing:
        raise ValueError(f"template is missing {sorted(missing)}")
    return PromptTemplate(
        template_id=meta["template"],
        version=meta["version"],
        system="\n".join(sections["system"]).strip(),
        user=Template("\n".join(sections["user"]).strip() + "\n"),
    )


@lru_cache(maxsize=None)
def load_template(name: str, version: str = "1") -> PromptTemplate:
    text = resources.files("oocverify.templates").joinpath(f"{name}_v{version}.txt").read_text(encoding="utf-8")
    return parse_template(text)
