"""Topic scene graphs: relational captioning ranked by distilled caption attention."""

__version__ = "0.1.0"
