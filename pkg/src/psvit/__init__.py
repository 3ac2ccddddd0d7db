"""Hierarchical vision transformers with token pooling and attention sharing,
plus a single-path supernet and FLOPS-constrained evolutionary search, all on
a small numpy autodiff core."""

__version__ = "0.1.0"
