"""Ego-centric multi-channel occupancy-grid observation.

Channels: presence, longitudinal velocity, lateral velocity, on_road.
The grid is 4 x 41 x 50: 41 lateral cells spanning +/-41 m (ego-frame y,
left positive) and 50 longitudinal cells spanning +/-50 m (ego-frame x,
forward positive), at 2 m resolution. Velocities are world-frame vectors
expressed in ego coordinates, clipped to +/-20 m/s and scaled by 1/20, so
every entry lies in [-1, 1].
"""

from __future__ import annotations

import math

import numpy as np

from .world import VEHICLE_LENGTH, VEHICLE_WIDTH

GRID_CHANNELS = 4
GRID_LATERAL = 41
GRID_LONGITUDINAL = 50
GRID_SHAPE = (GRID_CHANNELS, GRID_LATERAL, GRID_LONGITUDINAL)
CELL_SIZE = 2.0
VELOCITY_CLIP = 20.0

# Cell-center coordinates in the ego frame.
_LON_CENTERS = np.arange(GRID_LONGITUDINAL) * CELL_SIZE - 49.0   # x: -49 .. 49
_LAT_CENTERS = np.arange(GRID_LATERAL) * CELL_SIZE - 40.0        # y: -40 .. 40
_CELL_X = np.broadcast_to(_LON_CENTERS, (GRID_LATERAL, GRID_LONGITUDINAL))
_CELL_Y = np.broadcast_to(_LAT_CENTERS[:, None], (GRID_LATERAL, GRID_LONGITUDINAL))

_HALF_DIAG = math.hypot(VEHICLE_LENGTH, VEHICLE_WIDTH) / 2.0


def _on_road_mask(geom, ego_x, ego_y, cos_h, sin_h):
    wx = ego_x + cos_h * _CELL_X - sin_h * _CELL_Y
    wy = ego_y + sin_h * _CELL_X + cos_h * _CELL_Y
    half = geom.lane_width / 2.0
    rho = np.hypot(wx, wy)
    mask = (np.abs(rho - geom.inner_radius) <= half) | (np.abs(rho - geom.outer_radius) <= half)
    for lane in geom.lanes.values():
        if not hasattr(lane, "ux"):
            continue
        dx = wx - lane.x0
        dy = wy - lane.y0
        s = dx * lane.ux + dy * lane.uy
        lat = -dx * lane.uy + dy * lane.ux
        mask |= (s >= 0.0) & (s <= lane.length) & (np.abs(lat) <= half)
    return mask


def render_grid(world, mark_ego=True):
    """Render the observation for the current world state.

    mark_ego controls whether the ego's own footprint is stamped into the
    presence/velocity channels (on by default). When footprints overlap in
    a cell the later vehicle in world order wins the velocity channels;
    presence stays 1.
    """
    ego = world.ego
    cos_h = math.cos(ego.heading)
    sin_h = math.sin(ego.heading)
    grid = np.zeros(GRID_SHAPE, dtype=np.float32)
    grid[3] = _on_road_mask(world.geom, ego.x, ego.y, cos_h, sin_h)

    vehicles = world.vehicles if mark_ego else world.vehicles[1:]
    for veh in vehicles:
        dx = veh.x - ego.x
        dy = veh.y - ego.y
        # Vehicle center in the ego frame.
        cx = cos_h * dx + sin_h * dy
        cy = -sin_h * dx + cos_h * dy
        if abs(cx) > 49.0 + _HALF_DIAG + 1.0 or abs(cy) > 40.0 + _HALF_DIAG + 1.0:
            continue
        vx_w = veh.speed * math.cos(veh.heading)
        vy_w = veh.speed * math.sin(veh.heading)
        vx = min(max(cos_h * vx_w + sin_h * vy_w, -VELOCITY_CLIP), VELOCITY_CLIP)
        vy = min(max(-sin_h * vx_w + cos_h * vy_w, -VELOCITY_CLIP), VELOCITY_CLIP)
        vx /= VELOCITY_CLIP
        vy /= VELOCITY_CLIP
        rel = veh.heading - ego.heading
        cr = math.cos(rel)
        sr = math.sin(rel)
        j_lo = max(0, math.ceil((cx - _HALF_DIAG + 49.0) / CELL_SIZE))
        j_hi = min(GRID_LONGITUDINAL - 1, math.floor((cx + _HALF_DIAG + 49.0) / CELL_SIZE))
        i_lo = max(0, math.ceil((cy - _HALF_DIAG + 40.0) / CELL_SIZE))
        i_hi = min(GRID_LATERAL - 1, math.floor((cy + _HALF_DIAG + 40.0) / CELL_SIZE))
        for i in range(i_lo, i_hi + 1):
            ry = _LAT_CENTERS[i] - cy
            for j in range(j_lo, j_hi + 1):
                rx = _LON_CENTERS[j] - cx
                u = cr * rx + sr * ry
                if abs(u) > VEHICLE_LENGTH / 2.0:
                    continue
                v = -sr * rx + cr * ry
                if abs(v) > VEHICLE_WIDTH / 2.0:
                    continue
                grid[0, i, j] = 1.0
                grid[1, i, j] = vx
                grid[2, i, j] = vy
    return grid
