"""Small hand-checkable cases."""

import copy

from reservex.model import case_from_dict


def single_node_doc(demand=50.0, cost=20.0, capacity=100.0, wind=None, probs=None):
    """One area, one bus, one flexible unit and optionally a wind farm."""
    doc = {
        "areas": ["a1"],
        "nodes": [{"id": "n1", "area": "a1", "demand": demand}],
        "lines": [],
        "links": [],
        "generators": [
            {
                "id": "g1",
                "node": "n1",
                "cost": cost,
                "capacity": capacity,
                "reserve_up_cost": 2.0,
                "reserve_down_cost": 2.0,
                "reserve_up": 10.0,
                "reserve_down": 10.0,
                "flexible": True,
            }
        ],
        "wind_farms": [],
        "scenarios": [{"id": "s1", "probability": 1.0, "wind": {}}],
        "shed_cost": 1000.0,
        "existing_chi": {},
    }
    if wind is not None:
        probs = probs or [1.0 / len(wind)] * len(wind)
        doc["wind_farms"] = [{"id": "j1", "node": "n1", "capacity": max(wind)}]
        doc["scenarios"] = [
            {"id": f"s{k + 1}", "probability": p, "wind": {"j1": w}} for k, (w, p) in enumerate(zip(wind, probs))
        ]
    return doc


def two_node_doc():
    """Two areas joined by one tie-line; cheap unit in a1, load and wind in a2."""
    return {
        "areas": ["a1", "a2"],
        "nodes": [
            {"id": "n1", "area": "a1", "demand": 0.0},
            {"id": "n2", "area": "a2", "demand": 60.0},
        ],
        "lines": [{"id": "t1", "from": "n1", "to": "n2", "capacity": 40.0, "susceptance": 10.0}],
        "links": [{"id": "e1", "from_area": "a1", "to_area": "a2", "lines": ["t1"]}],
        "generators": [
            {"id": "g1", "node": "n1", "cost": 10.0, "capacity": 100.0, "reserve_up_cost": 1.0,
             "reserve_down_cost": 1.0, "reserve_up": 30.0, "reserve_down": 30.0, "flexible": True},
            {"id": "g2", "node": "n2", "cost": 40.0, "capacity": 100.0, "reserve_up_cost": 4.0,
             "reserve_down_cost": 4.0, "reserve_up": 30.0, "reserve_down": 30.0, "flexible": True},
        ],
        "wind_farms": [{"id": "j2", "node": "n2", "capacity": 40.0}],
        "scenarios": [
            {"id": "s1", "probability": 0.5, "wind": {"j2": 10.0}},
            {"id": "s2", "probability": 0.5, "wind": {"j2": 30.0}},
        ],
        "shed_cost": 1000.0,
        "existing_chi": {"e1": 0.0},
    }


def build(doc):
    return case_from_dict(copy.deepcopy(doc))
