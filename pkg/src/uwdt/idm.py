"""Intelligent Driver Model car-following law."""

from __future__ import annotations

import math


class IdmParams:
    __slots__ = ("v0", "T", "s0", "a", "b", "delta")

    def __init__(self, v0=16.0, T=1.5, s0=5.0, a=3.0, b=3.0, delta=4.0):
        if min(v0, T, s0, a, b, delta) <= 0.0:
            raise ValueError("IDM parameters must be strictly positive")
        if delta < 1.0:
            raise ValueError("IDM exponent must be >= 1")
        self.v0 = v0
        self.T = T
        self.s0 = s0
        self.a = a
        self.b = b
        self.delta = delta

    def perturbed(self, rng, fraction=0.1):
        """Copy with independent uniform +/-fraction scaling on a and T."""
        fa = 1.0 + fraction * (2.0 * rng.random() - 1.0)
        ft = 1.0 + fraction * (2.0 * rng.random() - 1.0)
        return IdmParams(self.v0, self.T * ft, self.s0, self.a * fa, self.b, self.delta)


def idm_acceleration(v, v_lead, gap, p):
    """Acceleration for speed v following a leader at bumper gap `gap`.

    With no leader (v_lead or gap is None) only the free-road term applies.
    A non-positive gap with a leader present is treated as an imminent
    collision and returns the maximum braking -2b. Output is clamped to
    [-2b, a].
    """
    if v < 0.0:
        raise ValueError("speed must be non-negative")
    free = 1.0 - (v / p.v0) ** p.delta
    if v_lead is None or gap is None:
        acc = p.a * free
    elif gap <= 0.0:
        return -2.0 * p.b
    else:
        s_star = p.s0 + v * p.T + v * (v - v_lead) / (2.0 * math.sqrt(p.a * p.b))
        acc = p.a * (free - (s_star / gap) ** 2)
    if acc > p.a:
        return p.a
    if acc < -2.0 * p.b:
        return -2.0 * p.b
    return acc
