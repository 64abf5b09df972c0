"""Geometry files shipped with the package."""
from importlib import resources

from ..galerkin import GeometryMap


def geometry_path(name):
    return resources.files(__name__).joinpath(name)


def load_geometry(name):
    """Load one of the shipped ``.geo`` files by name."""
    with resources.as_file(geometry_path(name)) as path:
        return GeometryMap.from_file(path)
