import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import five_bar_bisection
from wsgrasp.errors import DomainError, FormatError, SingularityError, UsageError
from wsgrasp.grippers import (BRANCH_UP, FiveBarPalm, builtin_grippers, dumps_gripper, forward_kinematics,
                              get_gripper, is_singular, parse_gripper, sample_config, solve_five_bar)

JAW = get_gripper("jaw2")
LINKS = (0.05, 0.04, 0.04, 0.05, 0.06)


# ---------------------------------------------------------------- five-bar

def test_rhombus_apex_on_symmetry_axis():
    palm = FiveBarPalm((0.04, 0.04, 0.04, 0.04, 0.04), (0, 1))
    for t1 in np.linspace(1.6, 2.05, 10):
        sol = solve_five_bar(palm, t1, math.pi - t1)
        assert abs(sol.c[0]) < 1e-12
        assert sol.residual(palm) < 1e-9


def test_symmetric_palm_matches_bisection():
    palm = FiveBarPalm((0.04, 0.04, 0.04, 0.04, 0.04), (0, 1))
    for t1 in (1.7, 1.9, 2.05):
        sol = solve_five_bar(palm, t1, math.pi - t1)
        ref = five_bar_bisection(palm.links, t1, math.pi - t1, BRANCH_UP)
        assert np.allclose(sol.c, ref, atol=1e-9)


def test_random_angles_close_within_tolerance():
    palm = FiveBarPalm(LINKS, (0, 1))
    rng = np.random.default_rng(0)
    solved = 0
    for t1, t2 in rng.uniform(0, math.pi, size=(10000, 2)):
        try:
            sol = solve_five_bar(palm, t1, t2)
        except SingularityError:
            continue
        solved += 1
        assert sol.residual(palm) < 1e-9
    assert solved > 1000


def test_random_angles_match_bisection_oracle():
    palm = FiveBarPalm(LINKS, (0, 1))
    rng = np.random.default_rng(1)
    checked = 0
    for t1, t2 in rng.uniform(0.3, 2.8, size=(60, 2)):
        try:
            sol = solve_five_bar(palm, t1, t2)
        except SingularityError:
            continue
        if sol.near_singular:
            continue
        ref = five_bar_bisection(LINKS, t1, t2, BRANCH_UP)
        assert ref is not None
        assert np.allclose(sol.c, ref, atol=1e-9)
        checked += 1
    assert checked > 20


def test_branch_selection_flips_apex():
    up = solve_five_bar(FiveBarPalm(LINKS, (0, 1)), 1.7, 1.4)
    down = solve_five_bar(FiveBarPalm(LINKS, (0, 1), branch=-1), 1.7, 1.4)
    assert not np.allclose(up.c, down.c)
    assert np.allclose(up.b, down.b) and np.allclose(up.d, down.d)


def test_unreachable_loop_is_singular():
    palm = FiveBarPalm(LINKS, (0, 1))
    with pytest.raises(SingularityError):
        solve_five_bar(palm, math.pi, 0.0)  # cranks point apart: |BD| = 0.16 > 0.08


def test_fully_stretched_is_flagged():
    l = 0.04
    palm = FiveBarPalm((l, l, l, l, 2 * l), (0, 1))
    # B = (-0.04, 0.04), D = (0.04, 0.04): |BD| = l2 + l3
    sol = solve_five_bar(palm, math.pi / 2, math.pi / 2)
    assert sol.near_singular


def test_palm_rejects_bad_links():
    with pytest.raises(DomainError):
        FiveBarPalm((0.04, 0.0, 0.04, 0.04, 0.04), (0, 1))


# ---------------------------------------------------------------- builtins

def test_builtin_structure():
    names = {g.name: g for g in builtin_grippers()}
    assert set(names) == {"jaw2", "tri3", "fivebar3"}
    assert (names["jaw2"].n_fingers, names["jaw2"].n_actuators) == (2, 1)
    assert (names["tri3"].n_fingers, names["tri3"].n_actuators) == (3, 4)
    assert names["fivebar3"].palm is not None and names["fivebar3"].n_fingers == 3
    assert names["fivebar3"].n_actuators == 3 and names["fivebar3"].arm_roll is not None


def test_jaw_zero_stroke_home():
    tips = forward_kinematics(JAW, [0.0])
    assert np.allclose(tips, [[-0.01, 0, 0.15], [0.01, 0, 0.15]])


def test_jaw_stroke_separation():
    tips = forward_kinematics(JAW, [0.04])
    assert np.linalg.norm(tips[1] - tips[0]) == pytest.approx(0.02 + 0.08, abs=1e-15)


def test_jaw_traces_parallel_segments():
    tips = np.array([forward_kinematics(JAW, [s]) for s in np.linspace(0, 0.04, 50)])
    for k in range(2):
        assert np.allclose(tips[:, k, 1:], tips[0, k, 1:])
    assert np.all(np.diff(tips[:, 1, 0]) > 0) and np.all(np.diff(tips[:, 0, 0]) < 0)


@pytest.mark.parametrize("gripper", builtin_grippers(), ids=lambda g: g.name)
def test_random_sweep(gripper):
    rng = np.random.default_rng(2)
    done = 0
    for _ in range(1000):
        q = sample_config(gripper, rng)
        if is_singular(gripper, q):
            continue
        tips = forward_kinematics(gripper, q)
        assert tips.shape == (gripper.n_fingers, 3) and np.all(np.isfinite(tips))
        done += 1
    assert done > 500


@pytest.mark.parametrize("gripper", builtin_grippers(), ids=lambda g: g.name)
def test_out_of_limit_always_errors(gripper):
    for i in range(gripper.n_actuators):
        for bad in (gripper.lower[i] - 1e-9, gripper.upper[i] + 1e-9):
            q = 0.5 * (gripper.lower + gripper.upper)
            q[i] = bad
            with pytest.raises(DomainError):
                forward_kinematics(gripper, q)
    with pytest.raises(DomainError):
        forward_kinematics(gripper, np.zeros(gripper.n_actuators + 1))


@pytest.mark.parametrize("gripper", builtin_grippers(), ids=lambda g: g.name)
@given(st.integers(0, 2 ** 31))
def test_fk_is_continuous(gripper, seed):
    rng = np.random.default_rng(seed)
    span = gripper.upper - gripper.lower
    q = gripper.lower + span * rng.uniform(0.05, 0.95, size=span.size)
    if is_singular(gripper, q):
        return
    d = 1e-6 * span * rng.choice([-1.0, 1.0], size=span.size)
    try:
        base = forward_kinematics(gripper, q)
        fwd = forward_kinematics(gripper, q + d)
        bwd = forward_kinematics(gripper, q - d)
        fwd2 = forward_kinematics(gripper, q + 2 * d)
    except SingularityError:
        return
    assert np.max(np.abs(fwd - base)) < 1e-4
    # directional derivative estimated at two step sizes agrees
    g1 = (fwd - bwd) / 2
    g2 = (fwd2 - base) / 2
    scale = max(np.max(np.abs(g1)), 1e-12)
    assert np.max(np.abs(g1 - g2)) / scale < 1e-3 or scale < 1e-10


def test_fk_deterministic():
    g = get_gripper("fivebar3")
    q = 0.5 * (g.lower + g.upper)
    assert np.array_equal(forward_kinematics(g, q), forward_kinematics(g, q))


# ---------------------------------------------------------------- text format

@pytest.mark.parametrize("gripper", builtin_grippers(), ids=lambda g: g.name)
def test_gripper_text_round_trip(gripper):
    back = parse_gripper(dumps_gripper(gripper))
    rng = np.random.default_rng(3)
    for _ in range(20):
        q = sample_config(gripper, rng)
        if is_singular(gripper, q):
            continue
        assert np.allclose(forward_kinematics(back, q), forward_kinematics(gripper, q), atol=1e-12)


def test_unknown_gripper_is_usage_error():
    with pytest.raises(UsageError):
        get_gripper("nonesuch")


def test_malformed_gripper_text():
    with pytest.raises(FormatError):
        parse_gripper("gripper x\nactuator a revolute 0 zero\n")
