"""Adapter exporting model logits and token maps for the keypose toolkit.

Holds no model logic: it accepts a (steps, vocab) logit matrix from any
source and writes the LGTD binary format, plus a JSON map from the
``<locNNNN>``/``<segNNN>`` token texts to the model's own token ids.
"""

from .adapter import NonFiniteLogit, RangeOverlap, token_map_export, write_dump

__version__ = "0.1.0"
