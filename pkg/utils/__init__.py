"""Utility modules for the project."""

from .safe_print import safe_print, log, set_debug, is_debug

__all__ = ['safe_print', 'log', 'set_debug', 'is_debug']
