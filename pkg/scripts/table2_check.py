"""Recompute the Final column of the published layer sweep from its printed components.

Prints each row, whether the 3-decimal rounding of the mean matches, and the
interval of finals reachable when each printed component is off by up to
half a unit in the last place.
"""

import argparse

from rmulab.metrics import final_score

TABLE_2 = [  # window, task aggregate, mia score, mmlu, printed final
    ("0,1,2", .547, .062, .244, .284), ("1,2,3", .542, .081, .249, .291), ("2,3,4", .355, .401, .250, .336),
    ("3,4,5", .433, .490, .254, .392), ("4,5,6", .508, .355, .229, .364), ("5,6,7", .637, .357, .262, .419),
    ("6,7,8", .597, .416, .250, .421), ("7,8,9", .616, .332, .245, .398), ("8,9,10", .631, .362, .265, .419),
    ("9,10,11", .574, .471, .264, .437), ("10,11,12", .282, .279, .243, .268),
    ("11,12,13", .582, .489, .254, .442), ("12,13,14", .565, .835, .261, .554),
    ("13,14,15", .538, .747, .258, .515),
]


def main() -> int:
    argparse.ArgumentParser(description=__doc__).parse_args()
    exact = 0
    print(f"{'window':>9} {'mean':>8} {'round':>6} {'printed':>7}  interval         match")
    for window, agg, mia, mmlu, printed in TABLE_2:
        mean = final_score(agg, mia, mmlu)
        ok = round(mean, 3) == printed
        exact += ok
        lo, hi = mean - 5e-4, mean + 5e-4
        print(f"{window:>9} {mean:8.5f} {round(mean, 3):6.3f} {printed:7.3f}  [{lo:.5f}, {hi:.5f}]  "
              f"{'yes' if ok else 'NO'}{'' if lo <= printed + 5e-4 and printed - 5e-4 <= hi else ' (outside)'}")
    print(f"{exact}/{len(TABLE_2)} rows reproduce the printed final at 3 decimals")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
