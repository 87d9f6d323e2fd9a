#!/usr/bin/env python3
"""Writes data/eight_env_scenario.json and data/eight.json.

Eight 30 m wide regions along x, each with its own obstacle layout. Sample
positions for the adaptation harness are taken on a lattice inside every
region, at two heights, away from obstacles.
"""
import json
import random
import sys
from pathlib import Path

W, D, H = 240.0, 60.0, 30.0
LABELS = ["open_field", "river", "park", "county", "forest", "city", "narrow_street", "bridge"]


def box(x0, y0, z0, x1, y1, z1):
    return {"min": [round(x0, 3), round(y0, 3), round(z0, 3)], "max": [round(x1, 3), round(y1, 3), round(z1, 3)]}


def river(x0, rng):
    obs = []
    # hedgerows along both banks, broken every 10 m
    for seg in range(3):
        xs = x0 + seg * 10 + 1
        obs.append(box(xs, 17, 0, xs + 8, 18.5, 7))
        obs.append(box(xs, 41.5, 0, xs + 8, 43, 7))
    for _ in range(4):
        x = x0 + rng.uniform(2, 27)
        y = rng.choice([rng.uniform(4, 13), rng.uniform(47, 56)])
        obs.append(box(x, y, 0, x + 1, y + 1, rng.uniform(8, 11)))
    return obs


def park(x0, rng):
    obs = []
    for ix in range(3):
        for iy in range(5):
            cx = x0 + 5 + ix * 10 + rng.uniform(-1.5, 1.5)
            cy = 6 + iy * 12 + rng.uniform(-2, 2)
            w = rng.uniform(3.5, 5.0)
            obs.append(box(cx - w / 2, cy - w / 2, 2.0, cx + w / 2, cy + w / 2, rng.uniform(8, 10)))  # canopy
            obs.append(box(cx - 0.4, cy - 0.4, 0.0, cx + 0.4, cy + 0.4, 2.0))  # trunk
    return obs


def county(x0, rng):
    obs = []
    for ix in range(2):
        for iy in range(3):
            cx = x0 + 8 + ix * 15
            cy = 10 + iy * 20 + rng.uniform(-1, 1)
            obs.append(box(cx - 5, cy - 4.5, 0, cx + 5, cy + 4.5, rng.uniform(5, 6.5)))
    return obs


def forest(x0, rng):
    obs = []
    for ix in range(8):
        for iy in range(15):
            cx = x0 + 2 + ix * 4 + rng.uniform(-0.7, 0.7)
            cy = 2 + iy * 4 + rng.uniform(-0.7, 0.7)
            if 27 < cy < 33 and ix % 2 == 0:
                continue  # a trail through the middle
            obs.append(box(cx - 0.5, cy - 0.5, 0, cx + 0.5, cy + 0.5, rng.uniform(12, 18)))
    return obs


def city(x0, rng):
    obs = []
    for bx0, bx1 in ((0.5, 9.5), (14.5, 23.5)):
        for by0, by1 in ((1, 11), (15, 23), (37, 45), (49, 59)):
            obs.append(box(x0 + bx0, by0, 0, x0 + bx1, by1, rng.uniform(16, 24)))
    return obs


def narrow_street(x0, rng):
    obs = []
    for seg in range(3):
        xs = x0 + seg * 10
        obs.append(box(xs, 0, 0, xs + 10, 26.5, rng.uniform(20, 25)))
        obs.append(box(xs, 33.5, 0, xs + 10, 60, rng.uniform(20, 25)))
    return obs


def bridge(x0, rng):
    obs = [box(x0 + 0.5, 0, 10, x0 + 29.5, 60, 12)]  # deck
    for y in (8, 30, 52):
        obs.append(box(x0 + 14, y - 1.5, 0, x0 + 16, y + 1.5, 10))  # piers
    return obs


LAYOUTS = [lambda x0, rng: [], river, park, county, forest, city, narrow_street, bridge]
# sampled y band per region; the river is sampled over the water only
BANDS = {"river": (19.5, 40.5)}


def inside(p, o, margin):
    return all(o["min"][k] - margin <= p[k] <= o["max"][k] + margin for k in range(3))


def main(out_dir):
    rng = random.Random(20240611)
    obstacles, regions, envs = [], [], []
    for i, label in enumerate(LABELS):
        x0 = 30.0 * i
        regions.append({"label": label, "min": [x0, 0.0, 0.0], "max": [x0 + 30.0, D, H]})
        local = LAYOUTS[i](x0, rng)
        obstacles += local
        pts = []
        for ix in range(8):
            for iy in range(11):
                for pz in (3.0, 7.0):
                    p = [x0 + 4.5 + 3.0 * ix, 12.0 + 3.6 * iy, pz]
                    lo, hi = BANDS.get(label, (0.0, D))
                    if lo <= p[1] <= hi and all(not inside(p, o, 1.0) for o in local):
                        pts.append(p)
        if len(pts) > 40:
            pts = sorted(rng.sample(pts, 40))
        envs.append({"label": label, "positions": pts})
    scenario = {
        "bounds": {"min": [0.0, 0.0, 0.0], "max": [W, D, H]},
        "start": [4.0, 30.0, 4.0],
        "goal": [236.0, 30.0, 6.0],
        "grid_resolution": 1.0,
        "robot_edge": 0.3,
        "regions": regions,
        "obstacles": obstacles,
    }
    out = Path(out_dir)
    (out / "eight_env_scenario.json").write_text(json.dumps(scenario, indent=1) + "\n")
    (out / "eight.json").write_text(
        json.dumps({"scenario": "eight_env_scenario.json", "oracle": "oracle.json", "environments": envs}, indent=1)
        + "\n")
    for e in envs:
        print(e["label"], len(e["positions"]))
    print("obstacles", len(obstacles))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else str(Path(__file__).resolve().parent.parent / "data"))
