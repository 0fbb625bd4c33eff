#!/usr/bin/env python3
"""Convert a discrete BIF network into the JSON network format read by mdnf.

One-time conversion step used to produce the files under data/. Rows are
renormalized because several published tables are rounded to 8 digits.

    python3 tools/convert_bif.py asia.bif > data/asia.bn
"""
import itertools
import json
import re
import sys


def parse_bif(text):
    variables = {}
    order = []
    for m in re.finditer(r"variable\s+(\S+)\s*\{\s*type\s+discrete\s*\[\s*(\d+)\s*\]\s*\{([^}]*)\}", text):
        name, card, states = m.group(1), int(m.group(2)), [s.strip() for s in m.group(3).split(",")]
        assert len(states) == card, name
        variables[name] = states
        order.append(name)

    cpts = {}
    for m in re.finditer(r"probability\s*\(\s*([^)]*)\)\s*\{([^}]*)\}", text):
        head, body = m.group(1), m.group(2)
        if "|" in head:
            child, parents = head.split("|")
            parents = [p.strip() for p in parents.split(",")]
        else:
            child, parents = head, []
        child = child.strip()
        rows = {}
        for line in body.strip().split(";"):
            line = line.strip()
            if not line:
                continue
            if line.startswith("table"):
                values = [float(v) for v in line[len("table"):].split(",")]
                rows[()] = values
            else:
                key, values = re.match(r"\(([^)]*)\)\s*(.*)", line).groups()
                key = tuple(k.strip() for k in key.split(","))
                rows[key] = [float(v) for v in values.split(",")]
        cpts[child] = (parents, rows)
    return variables, order, cpts


def main():
    text = open(sys.argv[1]).read()
    variables, order, cpts = parse_bif(text)
    nodes = []
    for name in order:
        parents, rows = cpts[name]
        flat = []
        # Row-major over parents in declaration order, child categories last.
        for combo in itertools.product(*[variables[p] for p in parents]):
            row = rows[tuple(combo)]
            total = sum(row)
            flat.extend(v / total for v in row)
        nodes.append({
            "name": name,
            "cardinality": len(variables[name]),
            "states": variables[name],
            "parents": parents,
            "cpt": flat,
        })
    json.dump({"nodes": nodes}, sys.stdout, indent=1)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
