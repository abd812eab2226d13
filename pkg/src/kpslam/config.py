"""Flat key=value configuration files.

One assignment per line, ``#`` starts a comment, values are parsed with
``ast.literal_eval`` and fall back to plain strings, so quoting strings is
optional.  ``true``/``false`` are accepted in lowercase as conveniences.
"""

import ast


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = _parse_value(value.strip())
    return out


def _parse_value(token: str):
    if token.lower() == "true":
        return True
    if token.lower() == "false":
        return False
    try:
        return ast.literal_eval(token)
    except (ValueError, SyntaxError):
        return token


def load_config_file(path) -> dict:
    with open(path, "r") as fh:
        return parse_config_text(fh.read())


def dump_config_text(values: dict) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, bool):
            lines.append(f"{key} = {'true' if v else 'false'}")
        elif isinstance(v, str):
            lines.append(f"{key} = {v!r}")
        else:
            lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
