"""A rotation number that rational numbers approximate absurdly well.

The schedule picks denominators q_k with |alpha q_k + p_k| <= C / q_k^k,
certified in exact rational arithmetic.  Each level adds q_k narrow bumps
whose sum solves the homology equation R(x + alpha) - R(x) = Q(x) level by
level.  The solution stays in H^1 while its H^2 norm explodes, which is the
regularity gap the construction is after.

Run:  python demos/liouville_construction.py
"""
from dlab import liouville as lv


def main():
    sched = lv.build_schedule("toy", 3)
    print(f"toy schedule, C={sched.C}")
    for k, (q, p, b) in enumerate(zip(sched.q, sched.p, sched.bounds), start=1):
        print(f"  level {k}: q={q if q < 10**6 else f'{float(q):.3e}'} p={p} "
              f"|alpha q + p| <= {float(b):.3e}")
    hp = lv.assemble_partials(sched)
    print(f"support of all bumps has exact measure {float(hp.support_measure):.3e}")
    for k in range(1, hp.K + 1):
        print(f"  homology residual through level {k}: {lv.homology_residual(hp, 1000, K=k):.1e}")
    table = lv.sobolev_growth(hp)
    print("\nSobolev norms of R_K")
    for r in table.rows:
        print(f"  K={r['K']} s={r['s']}: {r['norm']:.4e}")
    print(f"flags: {table.flags}")
    for r in lv.level_l4_norms(hp):
        print(f"  level {r['level']}: L4 norm {r['norm']:.3e}, certified {r['certified']}")
    _, info = lv.build_F(hp, n=32)
    print(f"\nweight F built from the construction: min {info['min_F']:.4f} (> 0)")


if __name__ == "__main__":
    main()
