"""Relation extraction with in-context learning.

Retrieve demonstrations for each test instance, assemble an
entity-type-constrained prompt, query a completion provider, and score
the parsed predictions against gold relation labels.
"""

from icl_re.corpus import NO_RELATION, Corpus, REInstance, RelationSchema, load_corpus

__all__ = [
    "NO_RELATION",
    "Corpus",
    "REInstance",
    "RelationSchema",
    "load_corpus",
]
