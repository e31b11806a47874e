"""Closed-form speedups next to single-thread measurements.

    python3 demos/speedup_table.py
"""

from erft import SpeedupQuery, bench, theoretical_speedup

print("closed form at H=W=512, p=64, M=8, B=32")
for arch in ("cnn", "attention"):
    for phase in ("train", "infer"):
        q = SpeedupQuery.for_grid(arch, phase, 512, 512, 64, 8, 32)
        print(f"  {arch:9s} {phase:5s} {theoretical_speedup(q)}")

print("\nmeasured at H=W=128, p=32, M=8, B=1")
for arch in ("cnn", "attention-toy"):
    for row in bench(arch, [128], p=32, m=8, batch=1):
        print(f"  {arch:13s} {row.phase:5s} measured {row.speedup_measured:6.2f}  "
              f"theory {float(row.speedup_theory):6.2f}")
