"""Guided multi-task representation learning on a synthetic histology benchmark.

Modules: ``autodiff`` (layers, losses, optimizer), ``guidance`` (multi-head
model, gradient reversal, loss weighting), ``trainloop``, ``features``
(concept measures), ``synthdata``, ``probe``, ``evalkit``, ``experiments``
and ``cli``.
"""

__version__ = "0.1.0"
