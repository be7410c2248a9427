"""Python access to the featspace reconstruction library."""

try:
    from ._featspace import *  # noqa: F401,F403
    from ._featspace import __version__
except ImportError:  # in-tree build: the extension sits next to the package
    from _featspace import *  # noqa: F401,F403
    from _featspace import __version__

STAGES = stage_names()  # noqa: F405
