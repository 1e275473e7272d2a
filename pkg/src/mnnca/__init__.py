"""Multi-neighborhood neural cellular automata for texture synthesis."""

__version__ = "0.1.0"
