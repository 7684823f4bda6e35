"""Entry point for voxeltrack."""

import sys
from multiprocessing import freeze_support

try:
    from voxeltrack.cli import main

# Show any import errors as the app otherwise will just silently fail
except ImportError as e:
    import traceback
    traceback.print_exc()
    sys.exit(3)


if __name__ == '__main__':
    freeze_support()
    sys.exit(main())
