"""Prompt template loading.

Templates ship as plain text files inside the package and can be overridden
per run by pointing a prompt directory at files with the same names. Question
prompts additionally look for a type-specific ``question_<type>.txt`` before
falling back to the generic ``question.txt``.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path


class PromptLibrary:
    def __init__(self, prompt_dir: str | Path | None = None):
        self._dir = Path(prompt_dir) if prompt_dir is not None else None
        self._cache: dict[str, str] = {}

    def _load(self, name: str) -> str | None:
        if name in self._cache:
            return self._cache[name]
        text: str | None = None
        if self._dir is not None:
            candidate = self._dir / f"{name}.txt"
            if candidate.is_file():
                text = candidate.read_text(encoding="utf-8")
        if text is None:
            builtin = resources.files("doctrace.templates").joinpath(f"{name}.txt")
            if builtin.is_file():
                text = builtin.read_text(encoding="utf-8")
        if text is not None:
            self._cache[name] = text
        return text

    def get(self, name: str) -> str:
        text = self._load(name)
        if text is None:
            raise KeyError(f"no prompt template named {name!r}")
        return text

    def question_template(self, question_type: str) -> str:
        specific = self._load(f"question_{question_type}")
        return specific if specific is not None else self.get("question")


DEFAULT_PROMPTS = PromptLibrary()
