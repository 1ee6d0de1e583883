"""Tree-regularized recurrent stability assessment with expert-guided regression trees."""

__version__ = "0.1.0"
