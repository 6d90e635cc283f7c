"""Cross-modality alignment by entropic optimal transport, with a toy two-stream encoder.

Modules: ``core_math`` (distances, pooling, normalization), ``ot`` (Sinkhorn
and exact transport), ``losses``, ``mgs`` (multi-granularity features and the
total objective), ``encoder``, ``data``, ``evalkit``, ``config``, ``train``,
``gradcheck`` and ``cli``.
"""

__version__ = "0.1.0"
