"""Seeded generator for larger multi-area test systems.

The layout mimics a regional interconnection: every area is a meshed ring of
buses with one wind farm, a cheap inflexible base unit and a few flexible
units; neighbouring areas are joined by links of two tie-lines each.
"""

from __future__ import annotations

import numpy as np


def make_synthetic_case(
    n_areas: int = 6,
    nodes_per_area: int = 7,
    n_scenarios: int = 10,
    seed: int = 7,
    chords: int = 1,
    ties_per_link: int = 2,
    flexible_per_area: int = 2,
) -> dict:
    """Return a case document (same schema as the JSON case files).

    Each flexible unit adds complementarity pairs to the preemptive MILP, as
    does each tie-line, so these two knobs drive solve time.
    """
    if n_areas < 2 or nodes_per_area < 4 or n_scenarios < 1:
        raise ValueError("need at least 2 areas, 4 nodes per area and 1 scenario")
    if ties_per_link not in (1, 2) or flexible_per_area not in (1, 2):
        raise ValueError("ties_per_link and flexible_per_area must be 1 or 2")
    rng = np.random.default_rng(seed)
    areas = [f"a{k + 1}" for k in range(n_areas)]
    nodes, lines, gens, farms = [], [], [], []
    node_of = {}  # (area index, local index) -> node id
    nid = 0
    for a in range(n_areas):
        for k in range(nodes_per_area):
            nid += 1
            node_of[a, k] = f"n{nid}"
            load = 0.0
            if k in (2, 4, nodes_per_area - 1):
                load = float(rng.integers(40, 90))
            nodes.append({"id": f"n{nid}", "area": areas[a], "demand": load})

    def add_line(fr, to, cap):
        lines.append(
            {
                "id": f"l{len(lines) + 1}",
                "from": fr,
                "to": to,
                "capacity": float(cap),
                "reactance": float(np.round(rng.uniform(0.08, 0.2), 3)),
            }
        )
        return lines[-1]["id"]

    for a in range(n_areas):
        for k in range(nodes_per_area):
            add_line(node_of[a, k], node_of[a, (k + 1) % nodes_per_area], 150)
        for c in range(chords):
            add_line(node_of[a, 0], node_of[a, (nodes_per_area // 2 + c) % nodes_per_area], 150)

    # area ring; two tie-lines per link
    links = []
    pairs = [(a, (a + 1) % n_areas) for a in range(n_areas)] if n_areas > 2 else [(0, 1)]
    for e, (a, b) in enumerate(pairs):
        ties = [add_line(node_of[a, 1], node_of[b, 0], 30)]
        if ties_per_link == 2:
            ties.append(add_line(node_of[a, nodes_per_area - 1], node_of[b, 3], 30))
        links.append({"id": f"e{e + 1}", "from_area": areas[a], "to_area": areas[b], "lines": ties})

    gid = 0
    for a in range(n_areas):
        specs = [(0, False, 120.0), (1, True, 60.0), (3, True, 60.0)]
        if flexible_per_area == 1:
            specs = [(0, False, 120.0), (1, True, 120.0)]
        for local, flexible, cap in specs:
            gid += 1
            base = 18.0 if not flexible else 28.0
            cost = float(np.round(base + rng.uniform(0, 20) + 2 * a, 1))
            gens.append(
                {
                    "id": f"i{gid}",
                    "node": node_of[a, local],
                    "cost": cost,
                    "capacity": cap,
                    "reserve_up_cost": round(0.1 * cost, 4),
                    "reserve_down_cost": round(0.1 * cost, 4),
                    "reserve_up": cap / 2 if flexible else 0.0,
                    "reserve_down": cap / 2 if flexible else 0.0,
                    "flexible": flexible,
                }
            )
        farms.append({"id": f"j{a + 1}", "node": node_of[a, 2], "capacity": float(rng.integers(40, 80))})

    # capacity factors with a shared component so areas are partly correlated
    common = rng.uniform(0.3, 1.0, size=n_scenarios)
    shares = np.clip(0.5 * common[None, :] + 0.5 * rng.uniform(0.2, 1.0, size=(n_areas, n_scenarios)), 0.0, 1.0)
    probs = rng.uniform(0.5, 1.5, size=n_scenarios)
    probs = np.round(probs / probs.sum(), 6)
    probs[-1] = round(1.0 - probs[:-1].sum(), 6)
    scenarios = []
    for s in range(n_scenarios):
        wind = {f["id"]: float(np.round(shares[a, s] * f["capacity"], 3)) for a, f in enumerate(farms)}
        scenarios.append({"id": f"s{s + 1}", "probability": float(probs[s]), "wind": wind})

    return {
        "name": f"synthetic_{n_areas}area",
        "description": f"Seeded synthetic system (seed {seed}).",
        "areas": areas,
        "nodes": nodes,
        "lines": lines,
        "links": links,
        "generators": gens,
        "wind_farms": farms,
        "scenarios": scenarios,
        "shed_cost": 1000.0,
        "existing_chi": {e["id"]: 0.0 for e in links},
    }
