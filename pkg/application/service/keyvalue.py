"""
Flat key=value text files (run configs, checkpoint manifests, sidecars)
"""

from pathlib import Path
from typing import Dict, Mapping, Union

from service.errors import DataError, ParseError


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(getattr(value, "value", value))


def dumps(entries: Mapping[str, object]) -> str:
    """One ``key=value`` line per entry, in mapping order"""
    lines = []
    for key, value in entries.items():
        text = format_value(value)
        if "\n" in text or "=" in key:
            raise ValueError(f"cannot serialise {key!r}={text!r} as a key=value line")
        lines.append(f"{key}={text}\n")
    return "".join(lines)


def loads(text: str, source: str = "<string>") -> Dict[str, str]:
    """
    Parse key=value lines; '#' starts a comment line, blank lines are skipped

    Raises:
        ParseError: A line has no '=' or a key repeats
    """
    entries: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{source}: expected key=value", line_number=number)
        key, value = line.split("=", 1)
        key = key.strip()
        if key in entries:
            raise ParseError(f"{source}: duplicate key {key!r}", line_number=number)
        entries[key] = value.strip()
    return entries


def read_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise DataError(f"file not found: {path}") from e
    return loads(text, source=path.name)


def write_file(path: Union[str, Path], entries: Mapping[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(entries), encoding="utf-8")
    return path
