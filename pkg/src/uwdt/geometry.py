"""Roundabout lane network: two circulating ring lanes plus four straight arms.

The ring is centered at the origin. Circulating lanes are full circles of
radius 20 m (inner) and 24 m (outer), split into 8 arcs at the junction
angles where the arms attach. Each compass arm (N/E/S/W) carries one
inbound and one outbound straight lane, laterally offset by half a lane
width from the arm axis (right-hand traffic), so each lane meets the outer
ring circle at a single point with zero positional gap. Circulation is
counterclockwise.
"""

from __future__ import annotations

import math

TWO_PI = 2.0 * math.pi

LANE_WIDTH = 4.0
INNER_RADIUS = 20.0
OUTER_RADIUS = 24.0
ARM_LENGTH = 150.0

ARMS = ("n", "e", "s", "w")
ARM_ANGLE = {"e": 0.0, "n": 0.5 * math.pi, "w": math.pi, "s": 1.5 * math.pi}


def wrap_angle(a: float) -> float:
    """Wrap to [0, 2*pi)."""
    a = math.fmod(a, TWO_PI)
    return a + TWO_PI if a < 0.0 else a


class StraightLane:
    __slots__ = ("lane_id", "x0", "y0", "ux", "uy", "length", "heading")

    def __init__(self, lane_id, x0, y0, heading, length):
        self.lane_id = lane_id
        self.x0 = x0
        self.y0 = y0
        self.heading = heading
        self.ux = math.cos(heading)
        self.uy = math.sin(heading)
        self.length = length

    def point_at(self, s):
        return (self.x0 + self.ux * s, self.y0 + self.uy * s)

    def heading_at(self, s):
        return self.heading

    def project(self, x, y):
        """Return (s, lateral) with s clamped to [0, length].

        lateral is signed, positive to the left of the travel direction.
        """
        dx = x - self.x0
        dy = y - self.y0
        s = dx * self.ux + dy * self.uy
        if s < 0.0:
            s = 0.0
        elif s > self.length:
            s = self.length
        lat = -dx * self.uy + dy * self.ux
        return s, lat


class ArcLane:
    """Counterclockwise circular arc centered at the origin."""

    __slots__ = ("lane_id", "radius", "a0", "sweep", "length")

    def __init__(self, lane_id, radius, a0, sweep):
        self.lane_id = lane_id
        self.radius = radius
        self.a0 = a0
        self.sweep = sweep
        self.length = radius * sweep

    def point_at(self, s):
        t = self.a0 + s / self.radius
        return (self.radius * math.cos(t), self.radius * math.sin(t))

    def heading_at(self, s):
        return self.a0 + s / self.radius + 0.5 * math.pi

    def project(self, x, y):
        """Return (s, lateral); s clamped to the arc, lateral = r_point - radius.

        Positive lateral is to the left of travel, which for a CCW arc is
        toward the ring center, so the sign convention matches StraightLane
        when lateral is measured as radius - r_point.
        """
        t = wrap_angle(math.atan2(y, x) - self.a0)
        if t <= self.sweep:
            s = t * self.radius
        elif t - self.sweep < TWO_PI - t:
            s = self.length
        else:
            s = 0.0
        lat = self.radius - math.hypot(x, y)
        return s, lat


class Roundabout:
    """The lane graph. Lanes are looked up by string id.

    Lane ids: ``{arm}_in`` / ``{arm}_out`` for arm lanes, ``ring_o_{k}`` /
    ``ring_i_{k}`` for the outer/inner arc with start boundary index k
    (boundaries sorted by angle).
    """

    def __init__(self, inner_radius=INNER_RADIUS, outer_radius=OUTER_RADIUS,
                 arm_length=ARM_LENGTH, lane_width=LANE_WIDTH):
        if inner_radius >= outer_radius:
            raise ValueError("inner radius must be smaller than outer radius")
        self.inner_radius = inner_radius
        self.outer_radius = outer_radius
        self.arm_length = arm_length
        self.lane_width = lane_width
        # Junction angle offset so the laterally shifted arm lanes land
        # exactly on the outer ring circle.
        self.delta = math.asin((lane_width / 2.0) / outer_radius)

        self.junction_angle = {}
        for arm in ARMS:
            phi = ARM_ANGLE[arm]
            self.junction_angle[("in", arm)] = wrap_angle(phi + self.delta)
            self.junction_angle[("out", arm)] = wrap_angle(phi - self.delta)

        boundaries = sorted((angle, key) for key, angle in self.junction_angle.items())
        self._boundary_angles = [b[0] for b in boundaries]
        self._boundary_keys = [b[1] for b in boundaries]
        n = len(boundaries)

        self.lanes = {}
        self.entry_arc = {}     # arm -> outer arc id starting at its in-junction
        self.arc_end_junction = {}   # outer arc id -> ("in"|"out", arm) at its end
        self._next_arc = {}
        self._adjacent = {}

        for k in range(n):
            a0 = self._boundary_angles[k]
            a1 = self._boundary_angles[(k + 1) % n]
            sweep = wrap_angle(a1 - a0)
            oid = f"ring_o_{k}"
            iid = f"ring_i_{k}"
            self.lanes[oid] = ArcLane(oid, outer_radius, a0, sweep)
            self.lanes[iid] = ArcLane(iid, inner_radius, a0, sweep)
            self._next_arc[oid] = f"ring_o_{(k + 1) % n}"
            self._next_arc[iid] = f"ring_i_{(k + 1) % n}"
            self._adjacent[oid] = iid
            self._adjacent[iid] = oid
            self.arc_end_junction[oid] = self._boundary_keys[(k + 1) % n]
            kind, arm = self._boundary_keys[k]
            if kind == "in":
                self.entry_arc[arm] = oid

        for arm in ARMS:
            phi = ARM_ANGLE[arm]
            a_in = self.junction_angle[("in", arm)]
            end = (outer_radius * math.cos(a_in), outer_radius * math.sin(a_in))
            heading_in = wrap_angle(phi + math.pi)
            lid = f"{arm}_in"
            self.lanes[lid] = StraightLane(
                lid,
                end[0] - arm_length * math.cos(heading_in),
                end[1] - arm_length * math.sin(heading_in),
                heading_in, arm_length)
            a_out = self.junction_angle[("out", arm)]
            start = (outer_radius * math.cos(a_out), outer_radius * math.sin(a_out))
            oid = f"{arm}_out"
            self.lanes[oid] = StraightLane(oid, start[0], start[1], phi, arm_length)

    # -- routing ---------------------------------------------------------

    def next_arc(self, arc_id):
        return self._next_arc[arc_id]

    def adjacent_arc(self, arc_id):
        """The other ring lane alongside a ring arc; None for arm lanes."""
        return self._adjacent.get(arc_id)

    def is_ring(self, lane_id):
        return lane_id.startswith("ring_")

    def is_outer(self, lane_id):
        return lane_id.startswith("ring_o_")

    def outer_arcs_between(self, entry_arm, exit_arm):
        """Outer arcs traversed from entry in-junction to exit out-junction."""
        arcs = []
        arc = self.entry_arc[entry_arm]
        for _ in range(len(self._boundary_angles)):
            arcs.append(arc)
            if self.arc_end_junction[arc] == ("out", exit_arm):
                return arcs
            arc = self._next_arc[arc]
        raise ValueError(f"no exit junction for arm {exit_arm!r}")

    def ring_route(self, entry_arm, exit_arm):
        """Full lane route from an inbound arm to an outbound arm."""
        return ([f"{entry_arm}_in"]
                + self.outer_arcs_between(entry_arm, exit_arm)
                + [f"{exit_arm}_out"])

    def arcs_from(self, arc_id, exit_arm=None, max_arcs=16):
        """Consecutive arcs starting at arc_id; outer arcs stop at exit_arm."""
        arcs = []
        arc = arc_id
        for _ in range(max_arcs):
            arcs.append(arc)
            if exit_arm is not None and self.arc_end_junction.get(arc) == ("out", exit_arm):
                return arcs
            arc = self._next_arc[arc]
        return arcs

    def locate_on_ring(self, ring, angle):
        """Map a global angle to (arc lane id, arc offset) on a ring.

        ring is "inner" or "outer".
        """
        prefix = "ring_i_" if ring == "inner" else "ring_o_"
        a = wrap_angle(angle)
        n = len(self._boundary_angles)
        for k in range(n):
            lane = self.lanes[f"{prefix}{k}"]
            rel = wrap_angle(a - lane.a0)
            if rel < lane.sweep:
                return lane.lane_id, rel * lane.radius
        # Exactly on a boundary: snap to the arc starting there.
        for k in range(n):
            lane = self.lanes[f"{prefix}{k}"]
            if abs(wrap_angle(a - lane.a0)) < 1e-12:
                return lane.lane_id, 0.0
        raise ValueError(f"angle {angle} not on ring")
