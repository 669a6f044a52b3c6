# sgstream: scene-graph-driven proactive streaming video orchestration
__version__ = "0.1.0"
