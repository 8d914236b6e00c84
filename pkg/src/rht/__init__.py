"""Reference heatmap transformer: one-shot facial landmark detection on numpy.

Modules: heatmaps (render/decode), stm (soft transfer), htm (hard transfer),
fusion (multi-scale feature fusion), losses, metrics, dataio (files,
manifests, augmentation, reference selection), pipeline (end-to-end
forward/backward), cli.
"""

__version__ = "0.1.0"
