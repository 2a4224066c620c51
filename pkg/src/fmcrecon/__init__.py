"""Full-matrix-capture ultrasonic imaging workbench.

Synthesizes FMC datasets with a 2D spectral-element elastic solver, reconstructs defects with
the total focusing method, reverse time migration and density-only full waveform inversion,
and scores reconstructions with threshold-based segmentation metrics.
"""

__version__ = "0.1.0"
