"""Latency of the default-size model against a parameter-matched recurrent model at L=1000.

Thread counts above the number of usable cores are dropped: they only measure
oversubscription.
"""
import sys

from _common import out_dir

from ufans.baseline import available_cores
from ufans.cli import main

if __name__ == "__main__":
    threads = ",".join(str(t) for t in (1, 2, 4, 8) if t <= available_cores())
    sys.exit(main(["bench", "--L", "1000", "--threads", threads, "--repeats", "5", "--out", out_dir("bench"),
                   *sys.argv[1:]]))
