"""Regenerate the bundled case files under src/reservex/data/.

Run from the repository root:  python3 scripts/make_fixtures.py
"""

import copy
import json
from pathlib import Path

from reservex.synthetic import make_synthetic_case

OUT = Path(__file__).resolve().parent.parent / "src" / "reservex" / "data"

X = 0.13
COSTS = [20, 30, 40, 30, 40, 50, 25, 35, 45]
CAPS = [120, 50, 50, 120, 50, 50, 120, 50, 50]
INFLEXIBLE = {"i1", "i4", "i7"}
DEMAND = {"n3": 220.0, "n6": 190.0, "n9": 220.0}
WIND_CAP = {"j3": 50.0, "j6": 80.0, "j9": 50.0}
WIND_NODE = {"j3": "n3", "j6": "n6", "j9": "n9"}


def _gen(k, flexible):
    c, p = COSTS[k], CAPS[k]
    return {
        "id": f"i{k + 1}",
        "node": f"n{k + 1}",
        "cost": c,
        "capacity": p,
        "reserve_up_cost": round(0.1 * c, 6),
        "reserve_down_cost": round(0.1 * c, 6),
        "reserve_up": p / 2 if flexible else 0.0,
        "reserve_down": p / 2 if flexible else 0.0,
        "flexible": flexible,
    }


def _scenarios(shares, probs):
    out = []
    for k, p in enumerate(probs):
        out.append({"id": f"s{k + 1}", "probability": p, "wind": {j: shares[j][k] * WIND_CAP[j] for j in shares}})
    return out


def base_case():
    areas = ["a1", "a2", "a3"]
    nodes = [{"id": f"n{k}", "area": areas[(k - 1) // 3], "demand": DEMAND.get(f"n{k}", 0.0)} for k in range(1, 10)]
    lines = []
    for a in range(3):
        n1, n2, n3 = (f"n{3 * a + k}" for k in (1, 2, 3))
        for fr, to in ((n1, n2), (n1, n3), (n2, n3)):
            lines.append({"id": f"l{fr[1:]}_{to[1:]}", "from": fr, "to": to, "capacity": 100.0, "reactance": X})
    ties = [("n2", "n4"), ("n3", "n6"), ("n5", "n7"), ("n6", "n9")]
    for fr, to in ties:
        lines.append({"id": f"l{fr[1:]}_{to[1:]}", "from": fr, "to": to, "capacity": 20.0, "reactance": X})
    links = [
        {"id": "e1", "from_area": "a1", "to_area": "a2", "lines": ["l2_4", "l3_6"]},
        {"id": "e2", "from_area": "a2", "to_area": "a3", "lines": ["l5_7", "l6_9"]},
    ]
    gens = [_gen(k, f"i{k + 1}" not in INFLEXIBLE) for k in range(9)]
    farms = [{"id": j, "node": WIND_NODE[j], "capacity": WIND_CAP[j]} for j in WIND_CAP]
    shares = {"j3": (1.0, 0.6), "j6": (0.8, 1.0), "j9": (1.0, 0.6)}
    return {
        "name": "three_area_base",
        "description": "Nine-bus, three-area illustrative system. Each link is modeled with two 20 MW tie-lines.",
        "areas": areas,
        "nodes": nodes,
        "lines": lines,
        "links": links,
        "generators": gens,
        "wind_farms": farms,
        "scenarios": _scenarios(shares, (0.6, 0.4)),
        "shed_cost": 1000.0,
        "existing_chi": {"e1": 0.0, "e2": 0.0},
    }


def connected_case():
    doc = base_case()
    doc["name"] = "three_area_connected"
    doc["description"] = "Base system with areas 1 and 3 joined by two extra 20 MW tie-lines (n1-n8, n3-n9)."
    doc["lines"] += [
        {"id": "l1_8", "from": "n1", "to": "n8", "capacity": 20.0, "reactance": X},
        {"id": "l3_9", "from": "n3", "to": "n9", "capacity": 20.0, "reactance": X},
    ]
    doc["links"].append({"id": "e3", "from_area": "a1", "to_area": "a3", "lines": ["l1_8", "l3_9"]})
    doc["existing_chi"]["e3"] = 0.0
    return doc


def emptycore_case():
    doc = connected_case()
    doc["name"] = "three_area_emptycore"
    doc["description"] = "Connected system with wider wind scenarios (0.8/0.2) and all units flexible."
    doc["generators"] = [_gen(k, True) for k in range(9)]
    shares = {"j3": (1.0, 0.8), "j6": (0.4, 1.0), "j9": (0.4, 1.0)}
    doc["scenarios"] = _scenarios(shares, (0.8, 0.2))
    return doc


def noflex_a2_case():
    doc = base_case()
    doc["name"] = "three_area_noflex_a2"
    doc["description"] = "Base system without the area-2 wind farm and with inflexible area-2 units."
    doc["wind_farms"] = [j for j in doc["wind_farms"] if j["id"] != "j6"]
    for s in doc["scenarios"]:
        del s["wind"]["j6"]
    for g in doc["generators"]:
        if g["node"] in ("n4", "n5", "n6"):
            g.update(reserve_up=0.0, reserve_down=0.0, flexible=False)
    return doc


def two_area_case(j3_cap=120.0, j6_cap=192.0):
    doc = copy.deepcopy(base_case())
    doc["name"] = "two_area"
    doc["description"] = (
        f"Areas 1 and 2 of the base system, wind capacities {j3_cap:g}/{j6_cap:g} MW. "
        "Other profiles: 105/168 and 90/144 MW."
    )
    keep = {"n1", "n2", "n3", "n4", "n5", "n6"}
    doc["areas"] = ["a1", "a2"]
    doc["nodes"] = [n for n in doc["nodes"] if n["id"] in keep]
    doc["lines"] = [ln for ln in doc["lines"] if ln["from"] in keep and ln["to"] in keep]
    doc["links"] = doc["links"][:1]
    doc["existing_chi"] = {"e1": 0.0}
    doc["generators"] = [g for g in doc["generators"] if g["node"] in keep]
    caps = {"j3": j3_cap, "j6": j6_cap}
    doc["wind_farms"] = [{"id": j, "node": WIND_NODE[j], "capacity": caps[j]} for j in caps]
    shares = {"j3": (1.0, 0.6), "j6": (0.8, 1.0)}
    doc["scenarios"] = [
        {"id": f"s{k + 1}", "probability": p, "wind": {j: shares[j][k] * caps[j] for j in caps}}
        for k, p in enumerate((0.6, 0.4))
    ]
    return doc


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    docs = {
        "three_area_base.json": base_case(),
        "three_area_connected.json": connected_case(),
        "three_area_emptycore.json": emptycore_case(),
        "three_area_noflex_a2.json": noflex_a2_case(),
        "two_area.json": two_area_case(),
        "six_area_synthetic.json": make_synthetic_case(ties_per_link=1, flexible_per_area=1),
    }
    for name, doc in docs.items():
        (OUT / name).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
        print("wrote", OUT / name)


if __name__ == "__main__":
    main()
