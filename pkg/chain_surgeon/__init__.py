"""Long-range integer chains: exact oracles, samplers, graph surgery and scaling fits."""
__version__ = "1.0.0"
