"""Deterministic 64-bit seed derivation shared by the simulator and engine.

Child seeds come from the splitmix64 finalizer applied to the parent seed
XORed with a stream offset, so distinct (parent, stream) pairs map to
well-separated seeds and the mapping is reproducible across platforms and
process layouts.
"""

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(parent: int, stream: int) -> int:
    """Derive the child seed for `stream` (0-based) under `parent`."""
    z = (parent ^ ((stream + 1) * _GOLDEN)) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)
