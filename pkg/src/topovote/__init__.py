"""Topologically manipulated classifier ensembles: training, voting,
evasion attacks and evaluation harness."""

__version__ = "0.1.0"
