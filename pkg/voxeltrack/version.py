"""Set the current package version.
This is used for both the command line and the run metadata.
"""

VERSION = '1.0.0'
