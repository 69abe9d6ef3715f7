"""Generative query auto-completion engine.

Retrieval-grounded suggestion generation with a verifier suite, composite
reward, preference-pair mining, toy alignment math, critique-and-revision
refinement, and a cache-first serving tier.
"""

__version__ = "0.1.0"


class QacError(Exception):
    """Base class for all engine errors."""
