"""
Resource management for CollapseLab.
This module locates the bundled scenario files.
"""
import os
import sys
from pathlib import Path
from typing import List


def resource_path(relative_path):
    """Get absolute path to resource, works for dev and for frozen builds"""
    try:
        # frozen builds unpack data next to sys._MEIPASS
        base_path = sys._MEIPASS
    except Exception:
        base_path = os.path.dirname(os.path.abspath(__file__))

    return os.path.join(base_path, relative_path)


class Scenarios:
    """Static class naming the bundled scenarios."""

    _scenario_paths = {
        'family_a': 'scenarios/family_a.json',
        'family_b': 'scenarios/family_b.json',
        'mirror_uu': 'scenarios/mirror_uu.json',
    }

    @classmethod
    def names(cls) -> List[str]:
        return sorted(cls._scenario_paths)

    @classmethod
    def get_path(cls, name) -> Path:
        """Get the path of a bundled scenario by name."""
        if name not in cls._scenario_paths:
            raise ValueError(f"Unknown scenario name: {name}")
        return Path(resource_path(cls._scenario_paths[name]))
