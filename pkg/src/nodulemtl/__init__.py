"""Multi-task 3-D lung nodule network on a from-scratch numpy autodiff engine.

Submodules: ``autodiff`` (tensors and reverse mode), ``layers``, ``windowing``
(HU windows, resampling, patches), ``phantom`` (synthetic nodules and labels),
``model``, ``losses``, ``optim``, ``training``, ``report`` and ``cli``.
"""

__version__ = "0.1.0"
