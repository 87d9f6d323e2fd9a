#!/usr/bin/env python3
"""Writes data/oracle.json from the geometry of data/eight_env_scenario.json.

The synthetic operator's mean preference per region is a fixed function of
three measured quantities: mean clearance of the sample positions, obstacle
volume fraction, and the lowest obstacle bottom above every sample (a ceiling).
Tight, cluttered regions get slow, close, cautious flight in line or column;
open regions get fast, spread flight in grid or circle.
"""
import json
import math
import sys
from pathlib import Path

LO = [1.0, 2.0, 0.5, 0.3, 0.0]
HI = [10.0, 20.0, 6.0, 5.0, 4.0]
STD = [0.04, 0.05, 0.04, 0.03, 0.03]
CAP = 15.0


def box_distance(p, o):
    d = [max(o["min"][k] - p[k], 0.0, p[k] - o["max"][k]) for k in range(3)]
    return math.sqrt(sum(x * x for x in d))


def overlap(o, r):
    v = 1.0
    for k in range(3):
        v *= max(0.0, min(o["max"][k], r["max"][k]) - max(o["min"][k], r["min"][k]))
    return v


def descriptors(scenario, region, positions):
    obs = [o for o in scenario["obstacles"] if overlap(o, region) > 0]
    vol = 1.0
    for k in range(3):
        vol *= region["max"][k] - region["min"][k]
    clutter = sum(overlap(o, region) for o in obs) / vol
    clear = sum(min([CAP] + [box_distance(p, o) for o in obs]) for p in positions) / len(positions)
    ceiling = scenario["bounds"]["max"][2]
    top = max(p[2] for p in positions)
    for o in obs:
        if o["min"][2] > top:
            ceiling = min(ceiling, o["min"][2])
    return clear, clutter, ceiling


def preference(clear, clutter, ceiling):
    o = 1.0 - math.exp(-clear / 4.0)  # openness in [0, 1)
    u = [
        0.1 + 0.6 * o,
        min(0.15 + 0.4 * o, (ceiling - 4.0 - LO[1]) / (HI[1] - LO[1])),
        0.1 + 0.6 * o,
        0.6 - 0.4 * o + 0.8 * clutter,
        0.9 * o,
    ]
    h = [LO[p] + min(max(u[p], 0.0), 1.0) * (HI[p] - LO[p]) for p in range(5)]
    h[3] = max(LO[3], min(h[3], 0.4 * clear))  # never more margin than the space offers
    return [round(x, 2) for x in h]


def main(data):
    data = Path(data)
    fixture = json.loads((data / "eight.json").read_text())
    scenario = json.loads((data / fixture["scenario"]).read_text())
    regions = {r["label"]: r for r in scenario["regions"]}
    envs = {}
    for e in fixture["environments"]:
        d = descriptors(scenario, regions[e["label"]], e["positions"])
        mean = preference(*d)
        envs[e["label"]] = {"mean": dict(zip(["h_inner", "h_height", "h_speed", "h_safety", "h_formation"], mean)),
                            "std": STD}
        print(e["label"], " ".join(f"{x:.3f}" for x in d), mean)
    out = {"ranges": {"lo": LO, "hi": HI}, "environments": envs}
    (data / "oracle.json").write_text(json.dumps(out, indent=1) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else str(Path(__file__).resolve().parent.parent / "data"))
