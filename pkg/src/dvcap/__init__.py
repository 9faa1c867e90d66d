"""Dense video captioning on precomputed clip features.

Modules: ``tensor`` (numpy reverse-mode autodiff), ``anchors``, ``tep``
(temporal event proposals), ``captioner``, ``metrics``, ``trainer``,
``dataio`` and ``cli``.
"""

__version__ = "0.1.0"
