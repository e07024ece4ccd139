import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shieldcraft.envmodel import make_env
from shieldcraft.geometry import Box
from shieldcraft.harness import max_grad_error
from shieldcraft.neural import (
    DaggerConfig,
    Mlp,
    RawGate,
    ReplayBuffer,
    TrainConfig,
    dagger_imitate,
    ddpg_update,
    forward,
    grad_check,
    make_actor,
    make_agent,
)
from shieldcraft.shield import eval_batch, initial_shield, serialize


def test_grad_check_random_nets():
    assert max_grad_error(100, seed=0) < 1e-4


def test_grad_check_zero_input_and_deep():
    rng = np.random.default_rng(1)
    net = Mlp([3, 5, 5, 5, 2], Box([-1.0] * 3, [1.0] * 3), Box([-2.0, -1.0], [2.0, 1.0]), rng, final_scale=1.0)
    assert grad_check(net, rng, x=np.zeros((1, 3))) < 1e-4
    assert grad_check(net, rng) < 1e-4


def test_zero_weight_net_outputs_box_center():
    net = Mlp([2, 4, 1], Box([-1.0, -1.0], [1.0, 1.0]), Box([-2.0], [2.0]), np.random.default_rng(0))
    net.set_flat(np.zeros_like(net.flat()))
    assert forward(net, [0.3, -0.7])[0] == 0.0


def test_one_one_one_net_hand_computed():
    net = Mlp([1, 1, 1], Box([-2.0], [2.0]), Box([-3.0], [3.0]), np.random.default_rng(0))
    # params order: W0, b0, W1, b1
    net.set_flat(np.array([0.5, 0.1, 2.0, -0.2]))
    x = 1.0
    z = x / 2.0                      # input rescaled from [-2, 2]
    h = np.tanh(0.5 * z + 0.1)
    expected = 3.0 * np.tanh(2.0 * h - 0.2)
    assert forward(net, [x])[0] == pytest.approx(expected, rel=1e-12)
    assert forward(net, [x])[0] == forward(net, [x])[0]


def test_forward_dim_mismatch():
    net = Mlp([2, 3, 1], Box([-1.0, -1.0], [1.0, 1.0]), None, np.random.default_rng(0))
    with pytest.raises(ValueError):
        net.forward([1.0, 2.0, 3.0])


def test_json_roundtrip():
    net = Mlp([2, 3, 1], Box([-1.0, -1.0], [1.0, 1.0]), Box([-2.0], [2.0]), np.random.default_rng(0))
    back = Mlp.from_json(net.to_json())
    x = np.random.default_rng(1).uniform(-1, 1, (5, 2))
    assert np.array_equal(back.forward(x), net.forward(x))


def test_dagger_constant_zero_teacher():
    env = make_env("road")
    rng = np.random.default_rng(2)
    student = make_actor(env, (64, 64), rng)
    student.set_flat(student.flat() + rng.normal(0, 0.3, student.flat().shape))
    out = dagger_imitate(student, lambda X: np.zeros((len(X), 1)), env, 4, rng)
    X = env.state_bounds.sample(rng, 1000)
    assert np.mean(np.abs(out.forward(X))) < 0.05


def test_dagger_acc_shield_and_history():
    env = make_env("acc")
    g = initial_shield("acc")
    rng = np.random.default_rng(3)
    cfg = DaggerConfig()
    out = dagger_imitate(make_actor(env, (64, 64), rng), lambda X: eval_batch(g, X), env, None, rng, cfg)
    X = env.state_bounds.sample(rng, 2000)
    mse = float(np.mean((out.forward(X) - eval_batch(g, X)) ** 2))
    assert mse < 0.05 * float(env.action_bounds.width[0]) ** 2
    assert len(cfg.history) == cfg.rounds
    assert all(b <= a for a, b in zip(cfg.history, cfg.history[1:]))


def test_dagger_zero_rounds_unchanged():
    env = make_env("road")
    rng = np.random.default_rng(4)
    student = make_actor(env, (8,), rng)
    assert dagger_imitate(student, lambda X: np.zeros((len(X), 1)), env, 0, rng) is student


def test_ddpg_zero_steps_unchanged():
    env = make_env("road")
    rng = np.random.default_rng(5)
    agent = make_agent(env, TrainConfig(hidden=(16,)), rng)
    before = agent.actor.flat().copy(), agent.critic.flat().copy()
    assert ddpg_update(agent, RawGate(), env, TrainConfig(hidden=(16,)), rng, steps=0) == []
    assert np.array_equal(agent.actor.flat(), before[0]) and np.array_equal(agent.critic.flat(), before[1])


def test_ddpg_seed_reproducible():
    env = make_env("acc")
    cfg = TrainConfig(hidden=(16, 16), warmup=64)

    def run(seed):
        rng = np.random.default_rng(seed)
        agent = make_agent(env, cfg, rng)
        logs = ddpg_update(agent, RawGate(), env, cfg, rng, steps=300)
        return agent.actor.flat(), [log.cost for log in logs]

    a, b = run(9), run(9)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_ddpg_does_not_touch_shield():
    from shieldcraft.blend import BlendedPolicy
    from tests.conftest import shipped

    env, g, phi = shipped("road")
    rng = np.random.default_rng(6)
    h = BlendedPolicy(g, phi, make_actor(env, (16,), rng), env)
    g_before, phi_before = serialize(g, phi), [b for b in phi.boxes]
    cfg = TrainConfig(hidden=(16,), warmup=64)
    agent = make_agent(env, cfg, rng, actor=h.f)
    ddpg_update(agent, h, env, cfg, rng, steps=200)
    assert serialize(h.g, h.phi) == g_before and h.phi.boxes == phi_before


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_ddpg_road_unshielded_learns(seed):
    # pure learning check: no violation penalty, so cost is the task cost alone
    env = make_env("road")
    cfg = TrainConfig(violation_penalty=0.0, warmup=2000)
    rng = np.random.default_rng(seed)
    agent = make_agent(env, cfg, rng)
    logs = ddpg_update(agent, RawGate(), env, cfg, rng, steps=20_000)
    first = np.mean([log.cost for log in logs[:10]])
    last = np.mean([log.cost for log in logs[-10:]])
    assert last <= 0.7 * first


def test_replay_buffer_ring():
    buf = ReplayBuffer(3, 1, 1)
    for i in range(5):
        buf.add([i], [0.0], float(i), [i + 1], False)
    assert len(buf) == 3
    assert sorted(buf.c.tolist()) == [2.0, 3.0, 4.0]
    s, a, c, s2, d = buf.sample(np.random.default_rng(0), 10)
    assert s.shape == (10, 1) and set(c) <= {2.0, 3.0, 4.0}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_actor_output_inside_action_box(seed):
    env = make_env("obstacle2")
    rng = np.random.default_rng(seed)
    net = make_actor(env, (8,), rng)
    net.set_flat(rng.normal(0, 10, net.flat().shape))
    out = net.forward(env.state_bounds.sample(rng, 50))
    assert np.all(out >= env.action_bounds.lo) and np.all(out <= env.action_bounds.hi)
