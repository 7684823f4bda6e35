"""Single object 3D tracking on voxel pseudo images."""

from .version import VERSION as __version__
