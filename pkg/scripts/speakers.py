"""Speaker-conditioned versus unconditioned model on the two-speaker task."""
import sys

from _common import out_dir

from ufans.cli import main

if __name__ == "__main__":
    sys.exit(main(["speakers", "--seed", "0", "--out", out_dir("speakers"), *sys.argv[1:]]))
