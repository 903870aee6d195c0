"""Probe-text sentinels shared by query builders, scorer backends, and validators.

Backends that use different native tokens (e.g. ``<mask>``) are expected to
translate these on their side of the wire.
"""

MASK = "[MASK]"
SEPARATOR = "[SEP]"
