"""Move the potential halfway toward the target: V' = V + (t - y) / 2.

usage: ibi_half_step.py CURVE TARGET POTENTIAL NEXT_POTENTIAL
"""

import sys


def read(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                x, y = line.split()[:2]
                rows.append((float(x), float(y)))
    return rows


def main(curve, target, potential, out):
    c, t, v = read(curve), read(target), read(potential)
    with open(out, "w", encoding="utf-8") as fh:
        for (x, vy), (_, cy), (_, ty) in zip(v, c, t):
            fh.write(f"{x:.17g} {vy + 0.5 * (ty - cy):.17g}\n")


if __name__ == "__main__":
    if len(sys.argv) != 5:
        sys.exit(__doc__)
    main(*sys.argv[1:])
