"""
Procedural lane-driving world.

A single straight lane runs along +x from the start to a goal line at
`route_length`. A chase camera renders the lane, its lines, the goal
marker, static obstacles and the ego car. Weather domains only change the
photometry of a render, never its geometry: the geometry masks of a state
are identical under every DomainSpec.

Reward (per step):
    R = lambda_v * v + lambda_col * col + lambda_out * out + r_const
    col = -1 on a collision step, out = -1 on a lane exit step
    + arrival_bonus on the arrival step
"""
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Optional

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from ..config import DomainSpec, WorldConfig
from ..middleware.error_handler import ParameterError
from ..utils.logger import get_logger

logger = get_logger(__name__)

ACC_BOUND = 3.0
STEER_BOUND = 0.3
# Clamped actions stay strictly inside the open action interval
_BOUND_MARGIN = 1e-6

REASONS = ("arrived", "collision", "timeout", "lane_exit", "running")

CAMERA_HEIGHT = 1.5
CHASE_DISTANCE = 4.0
HORIZON_FRACTION = 0.375
FOCAL_FRACTION = 0.8
EGO_HALF_LENGTH = 1.0
EGO_HALF_WIDTH = 0.5
EGO_RADIUS = 0.5

# Base palette (RGB in [0, 1])
_GRASS = np.array([0.30, 0.55, 0.25])
_ROAD = np.array([0.36, 0.36, 0.39])
_LINE = np.array([0.95, 0.95, 0.90])
_DASH = np.array([0.95, 0.85, 0.20])
_GOAL_A = np.array([0.95, 0.95, 0.95])
_GOAL_B = np.array([0.85, 0.15, 0.15])
_OBSTACLE = np.array([0.90, 0.45, 0.10])
_EGO = np.array([0.15, 0.20, 0.70])
_SKY_DAY = np.array([0.50, 0.70, 0.95])
_SKY_SUNSET = np.array([0.95, 0.55, 0.30])
_SKY_NIGHT = np.array([0.05, 0.07, 0.15])
_RAIN = np.array([0.80, 0.82, 0.88])


# ============================================================================
# Domain types
# ============================================================================

@dataclass(frozen=True)
class VehicleState:
    """Kinematic state of the ego vehicle."""
    position: tuple[float, float]
    heading: float
    speed: float
    lane_offset: float
    distance_to_goal: float
    step_index: int = 0

    def __post_init__(self):
        if not self.speed >= 0.0:
            raise ParameterError(f"speed must be >= 0, got {self.speed}")
        if not math.isfinite(self.lane_offset):
            raise ParameterError("lane_offset must be finite")
        if not self.distance_to_goal >= 0.0:
            raise ParameterError(f"distance_to_goal must be >= 0, got {self.distance_to_goal}")

    def metadata(self) -> dict[str, Any]:
        return {
            "x": float(self.position[0]),
            "y": float(self.position[1]),
            "heading": float(self.heading),
            "speed": float(self.speed),
            "lane_offset": float(self.lane_offset),
            "distance_to_goal": float(self.distance_to_goal),
        }


@dataclass(frozen=True)
class Action:
    acc: float
    steer: float

    def clamped(self) -> tuple["Action", bool]:
        """Clamp into the open bounds; the flag says whether anything moved."""
        acc_hi = ACC_BOUND - _BOUND_MARGIN
        steer_hi = STEER_BOUND - _BOUND_MARGIN
        acc = float(np.clip(self.acc, -acc_hi, acc_hi))
        steer = float(np.clip(self.steer, -steer_hi, steer_hi))
        if not (math.isfinite(self.acc) and math.isfinite(self.steer)):
            acc = 0.0 if not math.isfinite(self.acc) else acc
            steer = 0.0 if not math.isfinite(self.steer) else steer
        return Action(acc, steer), (acc != self.acc or steer != self.steer)


@dataclass
class Observation:
    image: np.ndarray
    velocity: float


@dataclass
class StepResult:
    observation: Observation
    reward: float
    terminated: bool
    reason: str
    reward_terms: dict[str, float] = field(default_factory=dict)


def validate_domain(domain: DomainSpec) -> DomainSpec:
    """Range check that also covers specs built without validation."""
    checks = (
        ("cloudiness", 0.0 <= domain.cloudiness <= 1.0),
        ("precipitation", 0.0 <= domain.precipitation <= 1.0),
        ("sun_altitude", -90.0 <= domain.sun_altitude <= 90.0),
        ("sun_azimuth", 0.0 <= domain.sun_azimuth < 360.0),
    )
    for name, ok in checks:
        if not ok:
            raise ParameterError(f"domain {domain.name!r}: {name} out of range", details={"field": name})
    return domain


class DomainRegistry:
    """Named DomainSpecs; domain indices follow registration order."""

    def __init__(self, domains: list[DomainSpec]):
        self._domains: dict[str, DomainSpec] = {}
        for d in domains:
            if d.name in self._domains:
                raise ParameterError(f"duplicate domain name {d.name!r}")
            self._domains[d.name] = validate_domain(d)

    def __getitem__(self, name: str) -> DomainSpec:
        if name not in self._domains:
            raise ParameterError(f"domain {name!r} is not registered")
        return self._domains[name]

    def __contains__(self, domain: object) -> bool:
        if isinstance(domain, DomainSpec):
            return self._domains.get(domain.name) == domain
        return domain in self._domains

    def __iter__(self):
        return iter(self._domains.values())

    def __len__(self) -> int:
        return len(self._domains)

    @property
    def names(self) -> list[str]:
        return list(self._domains)


# ============================================================================
# Camera geometry
# ============================================================================

@lru_cache(maxsize=8)
def _camera(resolution: int) -> dict[str, np.ndarray]:
    """Per-pixel depth and lateral offset of ground rays for a resolution."""
    horizon = int(HORIZON_FRACTION * resolution)
    focal = FOCAL_FRACTION * resolution
    rows = np.arange(resolution, dtype=np.float64)[:, None]
    cols = np.arange(resolution, dtype=np.float64)[None, :]
    ground = np.broadcast_to(rows > horizon, (resolution, resolution))
    depth_rows = CAMERA_HEIGHT * focal / np.maximum(rows - horizon + 0.5, 0.5)
    depth = np.broadcast_to(depth_rows, (resolution, resolution))
    lateral = (cols + 0.5 - resolution / 2.0) * depth / focal
    cam = {
        "horizon": np.array(horizon),
        "ground": ground.copy(),
        "depth": depth.copy(),
        "lateral": lateral,
        "footprint": depth / focal,
        "rows": np.broadcast_to(rows, (resolution, resolution)).copy(),
    }
    for arr in cam.values():
        arr.setflags(write=False)
    return cam


def _ground_coordinates(state: VehicleState, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    cam = _camera(resolution)
    c, s = math.cos(state.heading), math.sin(state.heading)
    cam_x = state.position[0] - CHASE_DISTANCE * c
    cam_y = state.position[1] - CHASE_DISTANCE * s
    wx = cam_x + cam["depth"] * c + cam["lateral"] * s
    wy = cam_y + cam["depth"] * s - cam["lateral"] * c
    return wx, wy


class SynthWorld:
    """
    Rendering, kinematics, reward and termination for one world layout.

    Pure given (state, action, domain, seed); the only mutable member is the
    diagnostics counter, so an instance must not be shared across actors.
    """

    def __init__(self, config: WorldConfig):
        self.config = config
        self.registry = DomainRegistry(config.domains)
        self.diagnostics: dict[str, int] = {"clamped_actions": 0, "steps": 0}
        self._obstacles = np.array(config.obstacles, dtype=np.float64).reshape(-1, 2)

    @property
    def resolution(self) -> int:
        return self.config.resolution

    def domain_index(self, domain: DomainSpec) -> int:
        return self.registry.names.index(domain.name)

    # ------------------------------------------------------------------
    # States
    # ------------------------------------------------------------------

    def make_state(self, x: float, y: float, heading: float, speed: float, step_index: int = 0) -> VehicleState:
        return VehicleState(
            position=(float(x), float(y)),
            heading=float(heading),
            speed=float(speed),
            lane_offset=float(y),
            distance_to_goal=float(max(0.0, self.config.route_length - x)),
            step_index=step_index,
        )

    def initial_state(self, rng: np.random.Generator) -> VehicleState:
        return self.make_state(
            x=0.0,
            y=rng.uniform(-0.6, 0.6),
            heading=rng.uniform(-0.05, 0.05),
            speed=0.0,
        )

    def random_state(self, rng: np.random.Generator) -> VehicleState:
        """State spread over lane offsets, headings and goal distances."""
        hw = self.config.lane_half_width
        return self.make_state(
            x=rng.uniform(0.0, self.config.route_length),
            y=rng.uniform(-0.9 * hw, 0.9 * hw),
            heading=rng.uniform(-0.35, 0.35),
            speed=rng.uniform(0.0, 0.6 * self.config.v_max),
        )

    def obstacle_ahead(self, state: VehicleState, horizon: float = 15.0) -> bool:
        if not len(self._obstacles):
            return False
        dx = self._obstacles[:, 0] - state.position[0]
        dy = np.abs(self._obstacles[:, 1] - state.position[1])
        return bool(np.any((dx > 0.0) & (dx < horizon) & (dy < 1.5)))

    # ------------------------------------------------------------------
    # Rendering
    # ------------------------------------------------------------------

    def geometry_masks(self, state: VehicleState) -> dict[str, np.ndarray]:
        """
        Boolean masks of scene elements for a state.

        Depends on the state only, which is what lets an aligner change
        the weather of an image while keeping the task geometry.
        """
        cfg = self.config
        res = cfg.resolution
        cam = _camera(res)
        ground = cam["ground"]
        wx, wy = _ground_coordinates(state, res)
        line_w = np.maximum(0.12, 0.6 * cam["footprint"])
        hw = cfg.lane_half_width

        on_route = (wx > -10.0) & (wx < cfg.route_length + 10.0)
        road = ground & on_route & (np.abs(wy) <= hw + 0.5)
        edge = road & (np.abs(np.abs(wy) - hw) < line_w)
        dash = road & (np.abs(wy) < line_w) & (np.mod(wx, 4.0) < 2.0)
        goal = road & (np.abs(wx - cfg.route_length) < 0.5)

        obstacle = np.zeros_like(ground)
        for ox, oy in self._obstacles:
            r = cfg.obstacle_radius
            obstacle |= ground & (np.abs(wx - ox) < r) & (np.abs(wy - oy) < r)

        c, s = math.cos(state.heading), math.sin(state.heading)
        rel_x = wx - state.position[0]
        rel_y = wy - state.position[1]
        along = rel_x * c + rel_y * s
        across = -rel_x * s + rel_y * c
        ego = ground & (np.abs(along) < EGO_HALF_LENGTH) & (np.abs(across) < EGO_HALF_WIDTH)

        puddle = road & (np.sin(1.3 * wx) * np.sin(2.1 * wy + 0.5 * wx) > 0.55)
        return {
            "sky": ~ground,
            "road": road,
            "lane_line": edge | dash,
            "edge_line": edge,
            "center_line": dash,
            "goal": goal,
            "obstacle": obstacle,
            "ego": ego,
            "puddle": puddle & ~(edge | dash | goal | obstacle | ego),
        }

    def _shadow_mask(self, state: VehicleState, domain: DomainSpec, masks: dict[str, np.ndarray]) -> np.ndarray:
        if domain.sun_altitude <= 2.0:
            return np.zeros_like(masks["road"])
        length = min(3.0, 1.2 / math.tan(math.radians(domain.sun_altitude)))
        az = math.radians(domain.sun_azimuth)
        sx, sy = -length * math.cos(az), -length * math.sin(az)
        wx, wy = _ground_coordinates(state, self.resolution)
        # A ground point is shadowed when stepping toward the sun hits an object
        px, py = wx - sx, wy - sy
        ground = _camera(self.resolution)["ground"]
        shadow = np.zeros_like(ground)
        r = self.config.obstacle_radius
        for ox, oy in self._obstacles:
            shadow |= ground & (np.abs(px - ox) < r) & (np.abs(py - oy) < r)
        c, s = math.cos(state.heading), math.sin(state.heading)
        rel_x, rel_y = px - state.position[0], py - state.position[1]
        shadow |= ground & (np.abs(rel_x * c + rel_y * s) < EGO_HALF_LENGTH) & (np.abs(-rel_x * s + rel_y * c) < EGO_HALF_WIDTH)
        return shadow & ~(masks["obstacle"] | masks["ego"])

    def rain_mask(self, domain: DomainSpec, seed: int) -> np.ndarray:
        """Seeded rain-streak mask; the only seed-dependent part of a render."""
        res = self.resolution
        mask = np.zeros((res, res), dtype=bool)
        count = int(round(domain.precipitation * 0.04 * res * res))
        if count == 0:
            return mask
        rng = np.random.default_rng(seed)
        xs = rng.integers(0, res, size=count)
        ys = rng.integers(0, res, size=count)
        lengths = rng.integers(3, 7, size=count)
        for x, y, length in zip(xs, ys, lengths):
            for k in range(int(length)):
                yy, xx = y + k, x + k // 3
                if 0 <= yy < res and 0 <= xx < res:
                    mask[yy, xx] = True
        return mask

    def render(self, state: VehicleState, domain: DomainSpec, seed: int) -> np.ndarray:
        """
        Render a state under a weather domain.

        Returns:
            float32 array (H, W, 3) in [0, 1]
        """
        validate_domain(domain)
        res = self.resolution
        cam = _camera(res)
        masks = self.geometry_masks(state)
        wx, _ = _ground_coordinates(state, res)

        alt = domain.sun_altitude
        elevation = float(np.clip((alt + 15.0) / 50.0, 0.0, 1.0))
        brightness = 0.35 + 0.65 * elevation
        warmth = float(np.clip(1.0 - abs(alt - 5.0) / 30.0, 0.0, 1.0)) if alt > -10.0 else 0.0
        night = float(np.clip((-alt - 5.0) / 30.0, 0.0, 1.0))
        tint = np.array([1.0 + 0.25 * warmth - 0.2 * night, 1.0 - 0.05 * warmth - 0.1 * night, 1.0 - 0.35 * warmth + 0.1 * night])

        # Base scene
        img = np.empty((res, res, 3), dtype=np.float64)
        img[:] = _GRASS
        img[masks["road"]] = _ROAD
        img[masks["edge_line"]] = _LINE
        img[masks["center_line"]] = _DASH
        checker = (np.floor(wx * 2.0).astype(np.int64) % 2 == 0)
        img[masks["goal"] & checker] = _GOAL_A
        img[masks["goal"] & ~checker] = _GOAL_B

        facing = 0.8 + 0.2 * math.cos(math.radians(domain.sun_azimuth) - state.heading)
        img[masks["obstacle"]] = _OBSTACLE * facing
        img[masks["ego"]] = _EGO * facing

        sky_color = (1.0 - warmth) * _SKY_DAY + warmth * _SKY_SUNSET
        sky_color = (1.0 - night) * sky_color + night * _SKY_NIGHT
        horizon = int(cam["horizon"])
        gradient = 0.8 + 0.2 * (cam["rows"] / max(horizon, 1))
        sky = masks["sky"]
        img[sky] = sky_color[None, :] * np.clip(gradient[sky], 0.0, 1.0)[:, None]

        # Sun: shadows, brightness, tint
        shadow = self._shadow_mask(state, domain, masks)
        img[shadow] *= 0.55
        img = np.clip(img * brightness * tint[None, None, :], 0.0, 1.0)

        # Precipitation: puddle reflections, then rain streaks
        p = domain.precipitation
        if p > 0.0:
            reflect = np.clip(sky_color * brightness * 1.1, 0.0, 1.0)
            a = 0.6 * p
            pud = masks["puddle"]
            img[pud] = (1.0 - a) * img[pud] + a * reflect
            streaks = self.rain_mask(domain, seed)
            a = 0.55
            img[streaks] = (1.0 - a) * img[streaks] + a * _RAIN * max(brightness, 0.5)

        # Clouds: per-pixel highlight compression and dimming, then desaturation
        c = domain.cloudiness
        if c > 0.0:
            img = (1.0 - 0.35 * c) * img / (1.0 + 0.5 * c * img)
            gray = img.mean(axis=-1, keepdims=True)
            img = img + (gray - img) * (0.6 * c)

        return np.clip(img, 0.0, 1.0).astype(np.float32)

    def observe(self, state: VehicleState, domain: DomainSpec, seed: int) -> Observation:
        return Observation(image=self.render(state, domain, seed), velocity=float(state.speed))

    # ------------------------------------------------------------------
    # Dynamics
    # ------------------------------------------------------------------

    def step(
        self,
        state: VehicleState,
        action: Action,
        domain: DomainSpec,
        seed: int = 0,
    ) -> tuple[VehicleState, StepResult]:
        """Advance one step; returns the next state and its StepResult."""
        cfg = self.config
        if state.step_index >= cfg.step_budget:
            raise ParameterError("episode already terminated (step budget exhausted)")
        act, clamped = action.clamped()
        if clamped:
            self.diagnostics["clamped_actions"] += 1
        self.diagnostics["steps"] += 1

        heading = state.heading + cfg.steer_gain * act.steer * cfg.dt
        speed = float(np.clip(state.speed + act.acc * cfg.dt, 0.0, cfg.v_max))
        x = state.position[0] + speed * cfg.dt * math.cos(heading)
        y = state.position[1] + speed * cfg.dt * math.sin(heading)
        nxt = self.make_state(x, y, heading, speed, step_index=state.step_index + 1)

        collision = False
        if len(self._obstacles):
            d = np.hypot(self._obstacles[:, 0] - x, self._obstacles[:, 1] - y)
            collision = bool(np.any(d < cfg.obstacle_radius + EGO_RADIUS))
        lane_exit = abs(y) > cfg.lane_half_width
        arrived = nxt.distance_to_goal <= cfg.arrival_radius
        timeout = nxt.step_index >= cfg.step_budget

        if collision:
            reason = "collision"
        elif lane_exit:
            reason = "lane_exit"
        elif arrived:
            reason = "arrived"
        elif timeout:
            reason = "timeout"
        else:
            reason = "running"

        col = -1.0 if collision else 0.0
        out = -1.0 if lane_exit else 0.0
        terms = {
            "speed": cfg.lambda_v * speed,
            "collision": cfg.lambda_col * col,
            "lane_exit": cfg.lambda_out * out,
            "constant": cfg.r_const,
            "arrival": cfg.arrival_bonus if reason == "arrived" else 0.0,
        }
        reward = terms["speed"] + terms["collision"] + terms["lane_exit"] + terms["constant"] + terms["arrival"]
        result = StepResult(
            observation=self.observe(nxt, domain, seed),
            reward=float(reward),
            terminated=reason != "running",
            reason=reason,
            reward_terms=terms,
        )
        return nxt, result


# ============================================================================
# Captions
# ============================================================================

TASK_PHRASE = "driving on the road"
CAPTION_PHRASES: tuple[str, ...] = (
    TASK_PHRASE,
    "clear", "cloudy", "wet", "soft rain", "hard rain", "noon", "sunset", "night",
    "vehicle left of center", "vehicle right of center", "vehicle centered",
    "turning left", "turning right",
    "goal far", "goal near",
    "obstacle ahead",
)


def weather_phrase(domain: DomainSpec) -> str:
    """Weather words from DomainSpec bins, e.g. `wet cloudy sunset`."""
    parts = []
    p, c = domain.precipitation, domain.cloudiness
    if p >= 0.6:
        parts.append("hard rain")
    elif p >= 0.3:
        parts.append("soft rain")
    elif p > 0.1:
        parts.append("wet")
    if c >= 0.5 and p < 0.3:
        parts.append("cloudy")
    if not parts:
        parts.append("clear")
    alt = domain.sun_altitude
    parts.append("noon" if alt > 30.0 else "sunset" if alt > -8.0 else "night")
    return " ".join(parts)


def caption(state_metadata: dict[str, Any], domain: DomainSpec) -> str:
    """Deterministic template caption for a rendered state."""
    offset = state_metadata["lane_offset"]
    heading = state_metadata["heading"]
    parts = [TASK_PHRASE, weather_phrase(domain)]
    if offset > 0.5:
        parts.append("vehicle left of center")
    elif offset < -0.5:
        parts.append("vehicle right of center")
    else:
        parts.append("vehicle centered")
    if heading > 0.12:
        parts.append("turning left")
    elif heading < -0.12:
        parts.append("turning right")
    parts.append("goal far" if state_metadata["distance_to_goal"] > 30.0 else "goal near")
    if state_metadata.get("obstacle_ahead"):
        parts.append("obstacle ahead")
    return ", ".join(parts)


# ============================================================================
# Gymnasium wrapper
# ============================================================================

class DrivingEnv(gym.Env):
    """Gymnasium view of a SynthWorld under one fixed weather domain."""

    metadata = {"render_modes": ["rgb_array"]}

    def __init__(self, config: WorldConfig, domain: DomainSpec, world: Optional[SynthWorld] = None):
        super().__init__()
        self.world = world or SynthWorld(config)
        self.config = config
        self.domain = validate_domain(domain)
        res = config.resolution
        self.observation_space = spaces.Dict({
            "image": spaces.Box(0.0, 1.0, shape=(res, res, 3), dtype=np.float32),
            "velocity": spaces.Box(0.0, config.v_max, shape=(1,), dtype=np.float32),
        })
        self.action_space = spaces.Box(
            low=np.array([-ACC_BOUND, -STEER_BOUND], dtype=np.float32),
            high=np.array([ACC_BOUND, STEER_BOUND], dtype=np.float32),
        )
        self.state: Optional[VehicleState] = None
        self._episode_seed = 0
        self._done = True

    def _render_seed(self) -> int:
        return (self._episode_seed * 100_003 + self.state.step_index) % (2**31 - 1)

    def _obs(self, image: np.ndarray) -> dict[str, np.ndarray]:
        return {"image": image, "velocity": np.array([self.state.speed], dtype=np.float32)}

    def reset(self, *, seed: Optional[int] = None, options: Optional[dict] = None):
        super().reset(seed=seed)
        self._episode_seed = int(self.np_random.integers(0, 2**31 - 1))
        self.state = self.world.initial_state(self.np_random)
        self._done = False
        image = self.world.render(self.state, self.domain, self._render_seed())
        return self._obs(image), {"state": self.state.metadata(), "reason": "running"}

    def step(self, action):
        if self._done:
            raise ParameterError("step() called on a terminated episode; call reset()")
        act = Action(float(action[0]), float(action[1]))
        next_seed = (self._episode_seed * 100_003 + self.state.step_index + 1) % (2**31 - 1)
        self.state, result = self.world.step(self.state, act, self.domain, next_seed)
        self._done = result.terminated
        truncated = result.reason == "timeout"
        terminated = result.terminated and not truncated
        info = {
            "state": self.state.metadata(),
            "reason": result.reason,
            "reward_terms": result.reward_terms,
        }
        return self._obs(result.observation.image), result.reward, terminated, truncated, info

    def render(self):
        if self.state is None:
            return None
        return self.world.render(self.state, self.domain, self._render_seed())


def state_record(state: VehicleState, world: SynthWorld) -> dict[str, Any]:
    """State metadata plus the derived flags captions need."""
    meta = state.metadata()
    meta["obstacle_ahead"] = world.obstacle_ahead(state)
    return meta


__all__ = [
    "ACC_BOUND", "STEER_BOUND", "REASONS", "Action", "DomainRegistry", "DomainSpec",
    "DrivingEnv", "Observation", "StepResult", "SynthWorld", "VehicleState",
    "caption", "state_record", "validate_domain", "weather_phrase",
]
