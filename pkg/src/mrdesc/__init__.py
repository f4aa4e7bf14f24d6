"""Multi-resolution Siamese patch descriptors on a small numpy autodiff engine.

Modules: ``tensor`` (reverse-mode engine), ``network``, ``patchpipe``,
``dataset``, ``train``, ``eval`` and ``cli``.
"""

__version__ = "0.1.0"
