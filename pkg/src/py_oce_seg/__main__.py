import sys

from py_oce_seg.interface.cli import main

if __name__ == "__main__":
    sys.exit(main())
