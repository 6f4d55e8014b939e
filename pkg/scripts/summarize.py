"""Print a markdown table from the summary.json files under a results dir."""
import argparse
import json
from pathlib import Path


def rows(root: Path):
    for path in sorted(root.glob("*/summary.json")):
        data = json.loads(path.read_text())
        for name, v in data.get("variants", {}).items():
            s = v["summary"]
            o = s["overall"]
            yield (data["experiment"], name, s["replies"], o["mean"], o["median"], o["p95"],
                   s["local_fraction"], s["p1_per_commit"], v.get("unanswered", 0))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("results", nargs="?", default="results")
    args = ap.parse_args(argv)
    print("| experiment | variant | replies | mean ms | median ms | p95 ms | local | p1/commit | unanswered |")
    print("|---|---|---|---|---|---|---|---|---|")
    for exp, name, n, mean, med, p95, local, p1, un in rows(Path(args.results)):
        print(f"| {exp} | {name} | {n} | {mean:.1f} | {med:.1f} | {p95:.1f} | {local:.2f} | {p1:.3f} | {un} |")


if __name__ == "__main__":
    main()
