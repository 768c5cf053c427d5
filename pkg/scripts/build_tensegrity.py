"""Write the T1-T3 rod-and-rope topology files into ``src/lgnn/data``.

The structures are planar reconstructions: rods are single edges of length 2,
ropes are straight chains of edges close to 0.5 long, supports are fixed.
Every member has unit mass and inertia 1/12, the values of a unit training link.
"""
import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "lgnn" / "data"
ROPE_SEGMENT = 0.5
MASS = 1.0
INERTIA = 1.0 / 12.0


class Builder:
    def __init__(self, label):
        self.label = label
        self.nodes = []
        self.edges = []

    def node(self, xy, fixed=False):
        self.nodes.append({"id": len(self.nodes), "q0": [float(xy[0]), float(xy[1])], "fixed": fixed})
        return len(self.nodes) - 1

    def _edge(self, i, j):
        a, b = np.array(self.nodes[i]["q0"]), np.array(self.nodes[j]["q0"])
        self.edges.append({"i": i, "j": j, "type": 0, "length": float(np.linalg.norm(a - b)),
                           "mass": MASS, "inertia": INERTIA})

    def rod(self, i, j):
        self._edge(i, j)

    def rope(self, i, j):
        a, b = np.array(self.nodes[i]["q0"]), np.array(self.nodes[j]["q0"])
        n = max(1, int(round(np.linalg.norm(b - a) / ROPE_SEGMENT)))
        prev = i
        for k in range(1, n):
            cur = self.node(a + (b - a) * k / n)
            self._edge(prev, cur)
            prev = cur
        self._edge(prev, j)

    def pendant(self, i, n, direction=(0.0, -1.0)):
        """Rope of ``n`` segments hanging from node ``i`` with a free end."""
        prev = i
        a = np.array(self.nodes[i]["q0"])
        for k in range(1, n + 1):
            cur = self.node(a + np.array(direction) * ROPE_SEGMENT * k)
            self._edge(prev, cur)
            prev = cur

    def dump(self):
        data = {"label": self.label, "dim": 2, "gravity": 9.81, "drag_coeff": 0.0,
                "nodes": self.nodes, "edges": self.edges}
        (OUT / f"{self.label}.json").write_text(json.dumps(data, indent=1) + "\n")


def polar(p, length, deg):
    r = np.deg2rad(deg)
    return np.array(p) + length * np.array([np.cos(r), np.sin(r)])


def t1():
    # rod slung between two ropes: a four-bar linkage that swings when released
    b = Builder("T1")
    s1 = b.node((0.0, 0.0), fixed=True)
    s2 = b.node((3.2, -0.4), fixed=True)
    p = b.node((0.0, -2.0))
    q = b.node((2.0, -2.0))
    b.rope(s1, p)
    b.rod(p, q)
    b.rope(q, s2)
    b.dump()


def t2():
    # crossed rods closed by two short ropes and hung from two supports
    b = Builder("T2")
    p1 = np.array([1.0, -1.0])
    p2 = polar(p1, 2.0, -30.0)
    p3 = np.array([1.0, -2.0])
    p4 = polar(p3, 2.0, 30.0)
    s1 = b.node((0.0, 0.0), fixed=True)
    s2 = b.node((p4[0] + 1.0, 0.2), fixed=True)
    n1, n2, n3, n4 = (b.node(x) for x in (p1, p2, p3, p4))
    b.rod(n1, n2)
    b.rod(n3, n4)
    b.rope(n1, n3)
    b.rope(n2, n4)
    b.rope(s1, n1)
    b.rope(s2, n4)
    b.dump()


def t3():
    # two-triangle rod lattice on two ropes, with a pendant rope
    b = Builder("T3")
    p1 = np.array([1.0, -1.5])
    p2 = p1 + np.array([2.0, 0.0])
    p3 = polar(p1, 2.0, -60.0)
    p4 = polar(p2, 2.0, -60.0)
    s1 = b.node((0.0, 0.0), fixed=True)
    s2 = b.node((4.5, 0.3), fixed=True)
    n1, n2, n3, n4 = (b.node(x) for x in (p1, p2, p3, p4))
    b.rod(n1, n2)
    b.rod(n1, n3)
    b.rod(n2, n3)
    b.rod(n2, n4)
    b.rod(n3, n4)
    b.rope(s1, n1)
    b.rope(s2, n2)
    b.pendant(n4, 4)
    b.dump()


if __name__ == "__main__":
    t1()
    t2()
    t3()
