"""Validation MSE versus the number of samplings N on the lag-100 task.

    python3 scripts/sweep_n.py [extra ufans flags, e.g. --n 3..7 --set epochs=12]
"""
import sys

from _common import out_dir

from ufans.cli import main

if __name__ == "__main__":
    sys.exit(main(["sweep-n", "--seed", "0", "--out", out_dir("sweep_n"), *sys.argv[1:]]))
