"""Plain-text ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Keys may repeat (e.g. one
``primitive`` line per object). Values of the form ``name=a,b,c`` are parsed
by :func:`parse_fields`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None,
                 path: str | None = None):
        where = []
        if path:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if key:
            where.append(f"key {key!r}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.key, self.line, self.path = key, line, path


@dataclass(frozen=True)
class Entry:
    key: str
    value: str
    line: int


class KeyValueConfig:
    def __init__(self, entries: list[Entry], path: str | None = None):
        self.entries = entries
        self.path = path

    @classmethod
    def parse(cls, text: str, path: str | None = None) -> "KeyValueConfig":
        entries = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("expected 'key = value'", line=lineno, path=path)
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError("empty key", line=lineno, path=path)
            entries.append(Entry(key, value, lineno))
        return cls(entries, path)

    @classmethod
    def load(cls, path) -> "KeyValueConfig":
        return cls.parse(Path(path).read_text(), str(path))

    def keys(self) -> set[str]:
        return {e.key for e in self.entries}

    def check_known(self, allowed) -> None:
        for e in self.entries:
            if e.key not in allowed:
                raise ConfigError("unknown key", key=e.key, line=e.line, path=self.path)

    def all(self, key: str) -> list[Entry]:
        return [e for e in self.entries if e.key == key]

    def get(self, key: str, default=None, required: bool = False) -> Entry | None:
        found = self.all(key)
        if not found:
            if required:
                raise ConfigError("missing required key", key=key, path=self.path)
            return default
        if len(found) > 1:
            raise ConfigError("key given more than once", key=key, line=found[1].line, path=self.path)
        return found[0]

    def floats(self, key: str, default=None, n: int | None = None, required: bool = False):
        e = self.get(key, required=required)
        if e is None:
            return default
        vals = self._convert(e, float)
        if n is not None and len(vals) != n:
            raise ConfigError(f"expected {n} numbers", key=key, line=e.line, path=self.path)
        return vals

    def float(self, key: str, default=None, required: bool = False):
        vals = self.floats(key, None, 1, required)
        return default if vals is None else vals[0]

    def int(self, key: str, default=None, required: bool = False):
        e = self.get(key, required=required)
        if e is None:
            return default
        vals = self._convert(e, int)
        if len(vals) != 1:
            raise ConfigError("expected one integer", key=key, line=e.line, path=self.path)
        return vals[0]

    def words(self, key: str, default=None, required: bool = False):
        e = self.get(key, required=required)
        return default if e is None else e.value.replace(",", " ").split()

    def str(self, key: str, default=None, required: bool = False):
        e = self.get(key, required=required)
        return default if e is None else e.value

    def _convert(self, e: Entry, typ):
        try:
            return [typ(tok) for tok in e.value.replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"cannot parse {e.value!r} as {typ.__name__}", key=e.key,
                              line=e.line, path=self.path) from None


def parse_fields(entry: Entry, path: str | None = None) -> tuple[list[str], dict[str, str]]:
    """Split ``word word name=value name=value`` into positional words and fields."""
    words, fields = [], {}
    for tok in entry.value.split():
        if "=" in tok:
            name, val = tok.split("=", 1)
            fields[name] = val
        else:
            words.append(tok)
    return words, fields


def field_floats(entry: Entry, fields: dict, name: str, n: int | None = None, default=None,
                 path: str | None = None):
    if name not in fields:
        if default is None:
            raise ConfigError(f"missing field {name!r}", key=entry.key, line=entry.line, path=path)
        return default
    try:
        vals = [float(v) for v in fields[name].split(",")]
    except ValueError:
        raise ConfigError(f"field {name!r} is not numeric", key=entry.key, line=entry.line,
                          path=path) from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"field {name!r} needs {n} values", key=entry.key, line=entry.line, path=path)
    return vals
