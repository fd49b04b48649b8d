"""Time softmax attention against the KEP-SVGP layer as sequences grow.

Softmax attention materializes an N x N matrix; the KEP-SVGP addition merge
only touches N x s projections, so its cost grows linearly.  Prints the
timings and the fitted log-log slopes.

    python3 demos/attention_cost.py
"""
from kepsvgp.cli import run_bench
from kepsvgp.config import BenchConfig

rows, slopes = run_bench(BenchConfig(lengths=[256, 512, 1024, 2048, 4096], repetitions=3))
print(f"{'mechanism':20s} {'N':>6s} {'median ms':>10s}")
for mechanism, n, median, *_ in rows:
    print(f"{mechanism:20s} {n:6d} {median * 1e3:10.2f}")
print()
for mechanism, slope in slopes.items():
    print(f"log-log slope {mechanism:20s} {slope:.2f}")
