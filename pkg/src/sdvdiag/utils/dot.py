"""Minimal DOT writing helpers."""


def dot_quote(text) -> str:
    text = str(text).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{text}"'


def fmt_weight(w: float) -> str:
    # fixed precision keeps DOT output byte-stable across platforms
    return f"{w:.4f}"
