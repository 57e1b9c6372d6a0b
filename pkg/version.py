"""
Version management for py-tubelet-detektor
"""

__version__ = "0.3.0-beta"
__build_date__ = "2026-10-17"

def get_version_info():
    """Returns version information as dictionary"""
    return {
        "version": __version__,
        "build_date": __build_date__
    }
