"""Per-step reward: linear combination of indicators, scaled to [0, 1]."""

from __future__ import annotations


class RewardWeights:
    """Weights for the collision / speed-band / lane-change indicators."""

    __slots__ = ("w_collision", "w_speed", "w_lane_change", "speed_low", "speed_high")

    def __init__(self, w_collision=-1.0, w_speed=0.2, w_lane_change=-0.05,
                 speed_low=8.0, speed_high=16.0):
        if w_collision >= 0.0 or w_lane_change >= 0.0 or w_speed <= 0.0:
            raise ValueError("collision and lane-change weights must be negative, "
                             "speed weight positive")
        self.w_collision = w_collision
        self.w_speed = w_speed
        self.w_lane_change = w_lane_change
        self.speed_low = speed_low
        self.speed_high = speed_high

    @property
    def raw_min(self):
        return self.w_collision + self.w_lane_change

    @property
    def raw_max(self):
        return self.w_speed


def raw_reward(collision, speed_ok, lane_change, weights):
    """w_c*c + w_v*v + w_l*l for binary indicators."""
    for name, val in (("collision", collision), ("speed_ok", speed_ok),
                      ("lane_change", lane_change)):
        if val not in (0, 1):
            raise ValueError(f"{name} indicator must be 0 or 1, got {val!r}")
    return (weights.w_collision * collision
            + weights.w_speed * speed_ok
            + weights.w_lane_change * lane_change)


def scale_reward(raw, weights):
    """Affine map of the raw reward onto [0, 1].

    The minimum (collision plus lane change, out of the speed band) maps to
    0 and the maximum (in-band speed, no collision, no lane change) to 1.
    Note that a collision without a lane change scales to 0.04, not 0: the
    map is applied exactly as defined rather than forcing collisions to 0.
    """
    lo = weights.raw_min
    hi = weights.raw_max
    if raw < lo - 1e-12 or raw > hi + 1e-12:
        raise ValueError(f"raw reward {raw} outside [{lo}, {hi}]")
    scaled = (raw - lo) / (hi - lo)
    return min(1.0, max(0.0, scaled))
