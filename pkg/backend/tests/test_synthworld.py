import numpy as np
import pytest

from app.config import CANONICAL_DOMAINS, DomainSpec, WorldConfig
from app.engine.synthworld import (
    ACC_BOUND,
    EGO_RADIUS,
    REASONS,
    STEER_BOUND,
    Action,
    DomainRegistry,
    DrivingEnv,
    SynthWorld,
    VehicleState,
    caption,
    validate_domain,
    weather_phrase,
)
from app.engine.vlm import Vocabulary, split_words
from app.middleware.error_handler import ParameterError

CLEAR_NOON = CANONICAL_DOMAINS[0]
RAIN = DomainSpec(name="Rain", cloudiness=0.0, precipitation=0.8, sun_altitude=70.0, sun_azimuth=150.0)


# ============================================================================
# Reward and termination
# ============================================================================

def test_reward_in_lane_at_speed(world):
    state = world.make_state(10.0, 0.0, 0.0, 5.0)
    nxt, result = world.step(state, Action(0.0, 0.0), CLEAR_NOON)
    assert result.reward == pytest.approx(4.9)
    assert result.reason == "running"
    assert not result.terminated
    assert nxt.step_index == 1


def test_reward_on_collision(world):
    # Obstacle at (30, 1) with radius 0.7
    state = world.make_state(29.5, 1.0, 0.0, 2.0)
    _, result = world.step(state, Action(0.0, 0.0), CLEAR_NOON)
    assert result.reward == pytest.approx(-98.1)
    assert result.reason == "collision"
    assert result.terminated


def test_reward_on_lane_exit(world):
    state = world.make_state(10.0, 1.95, 0.5, 5.0)
    _, result = world.step(state, Action(0.0, 0.0), CLEAR_NOON)
    assert result.reason == "lane_exit"
    assert result.reward == pytest.approx(5.0 - 100.0 - 0.1)


def test_arrival_bonus(world):
    state = world.make_state(79.5, 0.0, 0.0, 5.0)
    _, result = world.step(state, Action(0.0, 0.0), CLEAR_NOON)
    assert result.reason == "arrived"
    assert result.reward == pytest.approx(5.0 - 0.1 + 100.0)
    assert result.reward_terms["arrival"] == 100.0


def test_timeout_at_step_budget():
    world = SynthWorld(WorldConfig(resolution=16, step_budget=3))
    state = world.make_state(0.0, 0.0, 0.0, 0.0, step_index=2)
    nxt, result = world.step(state, Action(0.0, 0.0), CLEAR_NOON)
    assert result.reason == "timeout"
    with pytest.raises(ParameterError):
        world.step(nxt, Action(0.0, 0.0), CLEAR_NOON)


def test_actions_are_clamped_inside_open_bounds(world):
    clamped, moved = Action(10.0, -5.0).clamped()
    assert moved
    assert -ACC_BOUND < clamped.acc < ACC_BOUND
    assert -STEER_BOUND < clamped.steer < STEER_BOUND
    world.step(world.make_state(0.0, 0.0, 0.0, 0.0), Action(10.0, 0.0), CLEAR_NOON)
    assert world.diagnostics["clamped_actions"] == 1


def test_non_finite_action_becomes_zero():
    clamped, moved = Action(float("nan"), 0.1).clamped()
    assert clamped.acc == 0.0
    assert clamped.steer == pytest.approx(0.1)


def _expected_reason(world, nxt):
    cfg = world.config
    x, y = nxt.position
    hits = np.hypot(np.array([o[0] for o in cfg.obstacles]) - x, np.array([o[1] for o in cfg.obstacles]) - y)
    if np.any(hits < cfg.obstacle_radius + EGO_RADIUS):
        return "collision"
    if abs(y) > cfg.lane_half_width:
        return "lane_exit"
    if nxt.distance_to_goal <= cfg.arrival_radius:
        return "arrived"
    if nxt.step_index >= cfg.step_budget:
        return "timeout"
    return "running"


def test_random_rollouts_keep_the_environment_contract(world):
    cfg = world.config
    rng = np.random.default_rng(7)
    state = world.initial_state(rng)
    reasons = set()
    for i in range(10_000):
        # Out-of-range actions on purpose: the clamp has to catch them
        action = Action(rng.uniform(-6.0, 6.0), rng.uniform(-0.6, 0.6))
        nxt, result = world.step(state, action, CLEAR_NOON, seed=i)

        assert abs(nxt.heading - state.heading) < cfg.steer_gain * STEER_BOUND * cfg.dt
        assert abs(nxt.speed - state.speed) < ACC_BOUND * cfg.dt

        terms = result.reward_terms
        assert result.reward == pytest.approx(sum(terms.values()), abs=1e-9)
        penalty = result.reward - (nxt.speed - 0.1) - terms["arrival"]
        assert min(abs(penalty - p) for p in (0.0, -100.0, -200.0)) < 1e-9
        assert terms["arrival"] == (cfg.arrival_bonus if result.reason == "arrived" else 0.0)

        assert result.reason == _expected_reason(world, nxt)
        assert result.terminated == (result.reason != "running")
        reasons.add(result.reason)
        state = world.initial_state(rng) if result.terminated else nxt
    assert "lane_exit" in reasons
    assert world.diagnostics["steps"] == 10_000
    assert world.diagnostics["clamped_actions"] > 0


def test_termination_priority_when_conditions_coincide():
    world = SynthWorld(WorldConfig(resolution=16, step_budget=1, obstacles=[(10.2, 2.1)]))
    # Same step: collision, lane exit and timeout
    state = world.make_state(10.0, 2.1, 0.0, 2.0)
    _, result = world.step(state, Action(0.0, 0.0), CLEAR_NOON)
    assert result.reason == "collision"
    assert result.reward == pytest.approx(2.0 - 100.0 - 100.0 - 0.1)

    world = SynthWorld(WorldConfig(resolution=16, step_budget=1, obstacles=[]))
    _, result = world.step(world.make_state(79.5, 2.1, 0.0, 5.0), Action(0.0, 0.0), CLEAR_NOON)
    assert result.reason == "lane_exit"
    _, result = world.step(world.make_state(79.5, 0.0, 0.0, 5.0), Action(0.0, 0.0), CLEAR_NOON)
    assert result.reason == "arrived"


@pytest.mark.parametrize("kwargs", [
    {"speed": -1.0},
    {"lane_offset": float("inf")},
    {"distance_to_goal": -0.5},
])
def test_invalid_vehicle_state(kwargs):
    base = dict(position=(0.0, 0.0), heading=0.0, speed=0.0, lane_offset=0.0, distance_to_goal=10.0)
    with pytest.raises(ParameterError):
        VehicleState(**{**base, **kwargs})


# ============================================================================
# Rendering
# ============================================================================

def test_render_shape_range_and_determinism(world):
    state = world.random_state(np.random.default_rng(0))
    image = world.render(state, CLEAR_NOON, seed=3)
    assert image.shape == (16, 16, 3)
    assert image.dtype == np.float32
    assert image.min() >= 0.0 and image.max() <= 1.0
    np.testing.assert_array_equal(image, world.render(state, CLEAR_NOON, seed=3))


def test_weather_changes_pixels_not_geometry(world):
    state = world.random_state(np.random.default_rng(1))
    masks = world.geometry_masks(state)
    assert set(masks) >= {"sky", "road", "lane_line", "goal", "obstacle", "ego", "puddle"}
    night = CANONICAL_DOMAINS[5]
    assert not np.array_equal(world.render(state, CLEAR_NOON, 0), world.render(state, night, 0))
    for name, mask in world.geometry_masks(state).items():
        np.testing.assert_array_equal(mask, masks[name])


def test_render_seed_only_moves_rain_streaks(world):
    state = world.random_state(np.random.default_rng(2))
    a, b = world.render(state, RAIN, seed=1), world.render(state, RAIN, seed=2)
    streaks = world.rain_mask(RAIN, 1) | world.rain_mask(RAIN, 2)
    changed = np.any(a != b, axis=-1)
    assert not changed[~streaks].any()
    assert (world.rain_mask(RAIN, 1) ^ world.rain_mask(RAIN, 2)).any()


def test_cloudiness_never_brightens_a_render(world):
    state = world.random_state(np.random.default_rng(4))
    luminance = [
        float(world.render(state, CLEAR_NOON.model_copy(update={"cloudiness": c}), seed=0).mean())
        for c in np.linspace(0.0, 1.0, 11)
    ]
    assert all(b <= a + 1e-6 for a, b in zip(luminance, luminance[1:]))
    assert luminance[-1] < luminance[0]


def test_dry_domain_has_no_streaks(world):
    assert not world.rain_mask(CLEAR_NOON, seed=5).any()


def test_domain_validation():
    bad = DomainSpec.model_construct(name="bad", cloudiness=2.0, precipitation=0.0, sun_altitude=0.0, sun_azimuth=0.0)
    with pytest.raises(ParameterError):
        validate_domain(bad)
    with pytest.raises(ParameterError):
        DomainRegistry([CLEAR_NOON, CLEAR_NOON])


# ============================================================================
# Captions
# ============================================================================

def test_caption_template():
    meta = {"lane_offset": 0.0, "heading": 0.0, "distance_to_goal": 50.0}
    assert caption(meta, CLEAR_NOON) == "driving on the road, clear noon, vehicle centered, goal far"


def test_captions_differ_only_in_offset_phrase():
    meta = {"lane_offset": 0.0, "heading": 0.0, "distance_to_goal": 50.0}
    left = caption({**meta, "lane_offset": 1.0}, CLEAR_NOON).split(", ")
    centered = caption(meta, CLEAR_NOON).split(", ")
    diff = [(a, b) for a, b in zip(left, centered) if a != b]
    assert diff == [("vehicle left of center", "vehicle centered")]


@pytest.mark.parametrize("domain, expected", [
    (CANONICAL_DOMAINS[1], "hard rain noon"),
    (CANONICAL_DOMAINS[2], "clear sunset"),
    (CANONICAL_DOMAINS[3], "wet cloudy sunset"),
    (CANONICAL_DOMAINS[4], "soft rain sunset"),
    (CANONICAL_DOMAINS[5], "clear night"),
])
def test_weather_phrases(domain, expected):
    assert weather_phrase(domain) == expected


def test_captions_stay_in_vocabulary(world):
    vocab = Vocabulary.build()
    rng = np.random.default_rng(0)
    for domain in CANONICAL_DOMAINS:
        meta = world.random_state(rng).metadata()
        meta["obstacle_ahead"] = True
        assert all(word in vocab for word in split_words(caption(meta, domain)))


# ============================================================================
# Gymnasium wrapper
# ============================================================================

def test_env_reset_is_seeded(world_config):
    a, b = DrivingEnv(world_config, CLEAR_NOON), DrivingEnv(world_config, CLEAR_NOON)
    obs_a, info = a.reset(seed=3)
    obs_b, _ = b.reset(seed=3)
    np.testing.assert_array_equal(obs_a["image"], obs_b["image"])
    assert obs_a["velocity"].shape == (1,)
    assert info["reason"] == "running"
    assert a.observation_space.contains(obs_a)


def test_env_episode_terminates_and_rejects_extra_steps():
    config = WorldConfig(resolution=16, step_budget=5)
    env = DrivingEnv(config, CLEAR_NOON)
    env.reset(seed=0)
    env.action_space.seed(0)
    done, info = False, {}
    while not done:
        _, _, terminated, truncated, info = env.step(env.action_space.sample())
        done = terminated or truncated
    assert info["reason"] in REASONS
    with pytest.raises(ParameterError):
        env.step(np.zeros(2, dtype=np.float32))
