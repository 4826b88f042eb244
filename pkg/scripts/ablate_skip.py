"""Matched runs with and without skip connections on the lag-100 task (N=5 by default)."""
import sys

from _common import out_dir

from ufans.cli import main

if __name__ == "__main__":
    sys.exit(main(["ablate-skip", "--seed", "0", "--out", out_dir("ablate_skip"), *sys.argv[1:]]))
