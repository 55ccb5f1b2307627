"""minimt: a desk-scale neural machine translation pipeline toolkit.

Implements a complete small-data translation recipe end to end: subword
vocabularies, corpus sampling and sharding, micro transformer and
dynamic-convolution models, tagged back-translation with iterative joint
training, ensemble and right-to-left knowledge distillation, checkpoint
averaging, random ensemble search, corpus BLEU scoring, and a manifest-driven
pipeline runner. Everything is seeded and reproducible on a laptop CPU.
"""

__version__ = "0.1.0"
