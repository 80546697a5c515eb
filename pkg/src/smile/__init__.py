"""Extended-FOV simultaneous multislice reconstruction toolkit.

Modules: :mod:`model` (signal model and FFTs), :mod:`phantom`,
:mod:`sampling`, :mod:`calib`, :mod:`recon`, :mod:`metrics`, :mod:`io`,
:mod:`experiments` and :mod:`cli`.
"""

__version__ = "0.1.0"
