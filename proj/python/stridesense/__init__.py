"""Audio-based perceived-exertion (Borg RPE) regression toolkit."""

try:
    from ._stridesense import *  # noqa: F401,F403  (installed layout)
    from ._stridesense import __version__  # noqa: F401
except ImportError:  # build-tree layout: module next to the package on sys.path
    from _stridesense import *  # noqa: F401,F403
    from _stridesense import __version__  # noqa: F401
