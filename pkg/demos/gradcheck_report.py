"""Finite-difference check of every registered op and one MAGA block per kernel size."""

from maga import gradcheck as GC
from maga.attention import MagaConfig

for r in GC.op_suite(seeds=3):
    print(f"{r.name:20s} {r.max_rel_err:.2e}  {'ok' if r.passed else 'FAIL'}")
for k in (3, 5, 7):
    r = GC.check_block(MagaConfig(dim=4, k=k), seed=0)
    print(f"{r.name:40s} {r.max_rel_err:.2e}  {'ok' if r.passed else 'FAIL'}")
