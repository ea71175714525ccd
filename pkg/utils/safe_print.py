"""
Console output helpers for qualret.

safe_print never raises on characters the console encoding cannot
represent; log() adds a level and writes diagnostics to stderr so that
result data printed to stdout (CSV rows, reports) stays clean.

Usage:
    from utils import safe_print, log

    safe_print("[Trainer] epoch 1/30 total=4.1")
    log('WARN', "[Encoder] scale 0.35 skipped")
"""

import os
import sys
import builtins

_debug = os.getenv('QUALRET_DEBUG', 'false').lower() == 'true'


def set_debug(enabled: bool):
    """Toggle DEBUG output of log() (Config calls this on load)."""
    global _debug
    _debug = bool(enabled)


def is_debug() -> bool:
    return _debug


def safe_print(*args, **kwargs):
    """
    print() that survives unencodable characters.

    Surrogates coming from badly decoded bytes are repaired first; if the
    stream still cannot encode the text, offending characters become '?'.
    """
    cleaned_args = []
    for arg in args:
        text = str(arg)
        try:
            text.encode('utf-8')
        except UnicodeEncodeError:
            text = text.encode('utf-8', errors='surrogateescape').decode('utf-8', errors='replace')
        cleaned_args.append(text)

    try:
        builtins.print(*cleaned_args, **kwargs)
    except UnicodeEncodeError:
        stream = kwargs.get('file') or sys.stdout
        encoding = getattr(stream, 'encoding', None) or 'utf-8'
        sep = kwargs.get('sep', ' ')
        message = sep.join(cleaned_args).encode(encoding, errors='replace').decode(encoding)
        kwargs = {k: v for k, v in kwargs.items() if k != 'sep'}
        builtins.print(message, **kwargs)


def log(level: str, message: str):
    """Write a diagnostic line to stderr; DEBUG lines only in debug mode."""
    if level == 'DEBUG' and not _debug:
        return
    if level == 'INFO':
        safe_print(message, file=sys.stderr)
    else:
        safe_print(f"[{level}] {message}", file=sys.stderr)


__all__ = ['safe_print', 'log', 'set_debug', 'is_debug']
