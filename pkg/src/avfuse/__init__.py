"""Audio-visual anomaly-event classification toolkit.

Numpy-backed numeric kernels with explicit backward passes, a log-mel audio
front end, two small CNN branches with five fusion strategies, a training
and evaluation harness, and a synthetic audio-visual dataset generator.
"""

__version__ = "0.1.0"
