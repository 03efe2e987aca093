"""Two disjoint uniform sources and what lives inside their divergence balls.

U(0,2) and U(2,4) are as far apart as threshold rays can tell (divergence 2).
U(1,3) straddles both, so it sits inside every ball around them, yet no
mixture of the two sources equals it: the balls are strictly larger than the
convex hull.  A candidate can only fall outside the balls when the sources
overlap, so the far-away U(4,5) is checked against U(0,2), U(1,3).
"""

from dannce_lab.domains import example1_fixture
from dannce_lab.geometry import (
    check_condition,
    exact_interval_divergence,
    intersection_membership,
    max_pairwise_divergence,
    mixture,
    simplex_grid,
)

fx = example1_fixture()
p1, p2 = fx.sources.sources

print("d(U(0,2), U(2,4)) =", exact_interval_divergence(p1, p2))
print("d(U(0,2), U(1,3)) =", exact_interval_divergence(p1, fx.s))
print("d(U(2,4), U(1,3)) =", exact_interval_divergence(p2, fx.s))

# U(1,3) meets the condition for every weighting of the sources
worst = min(check_condition(fx.sources, fx.s, weights=w).slack for w in simplex_grid(2, 100))
print(f"\nU(1,3): smallest condition slack over a 101-point weight grid = {worst:.3f}")
print("inside all balls:", intersection_membership(fx.sources, fx.s))

# ... but it is not a mixture: the closest mixture is still far away
gaps = [exact_interval_divergence(mixture(fx.sources, w), fx.s) for w in simplex_grid(2, 100)]
print(f"closest mixture to U(1,3) has divergence {min(gaps):.3f}")

# the overlapping pair has largest gap 1, and U(4,5) breaks the condition
rho = max_pairwise_divergence(fx.tight_sources.sources)
rep = check_condition(fx.tight_sources, fx.far)
print(f"\nU(0,2), U(1,3): largest gap {rho:.1f}")
print(f"U(4,5): weighted divergence {rep.lhs:.1f}, slack {rep.slack:.1f}, passes = {rep.passed}")
print("inside all balls:", intersection_membership(fx.tight_sources, fx.far))
