#!/usr/bin/env python3
"""Convert the public MUSK molecule archives to the bag CSV format.

The UCI archives (MUSK "Version 1" / "Version 2") ship a comma-separated
data file (clean1.data / clean2.data) with one row per conformation:

    molecule_name,conformation_name,f1,...,f166,class

This writes the canonical bag CSV consumed by `scmil`:

    bag_id,label,f0,...,f165

Usage:
    python3 tools/musk_to_csv.py clean1.data data/musk1.csv
"""

import csv
import os
import sys


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__.strip(), file=sys.stderr)
        return 2
    src, dst = sys.argv[1], sys.argv[2]
    parent = os.path.dirname(dst)
    if parent:
        os.makedirs(parent, exist_ok=True)

    rows = []
    with open(src, newline="") as f:
        for record in csv.reader(f):
            if not record or all(not field.strip() for field in record):
                continue
            if len(record) != 169:
                raise SystemExit(f"unexpected field count {len(record)} in {src}")
            molecule = record[0].strip().strip('"')
            features = [field.strip() for field in record[2:168]]
            label = int(float(record[168]))
            if label not in (0, 1):
                raise SystemExit(f"unexpected class value {record[168]!r}")
            rows.append((molecule, label, features))

    molecules = {}
    for molecule, label, _ in rows:
        if molecules.setdefault(molecule, label) != label:
            raise SystemExit(f"molecule {molecule} has inconsistent labels")

    with open(dst, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bag_id", "label"] + [f"f{i}" for i in range(166)])
        for molecule, label, features in rows:
            writer.writerow([molecule, label] + features)

    positives = sum(molecules.values())
    print(
        f"wrote {dst}: {len(rows)} instances, {len(molecules)} bags "
        f"({positives} positive)"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
