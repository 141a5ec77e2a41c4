"""Calibration, step rewards, episode risk, and full-episode annotation."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from oracles import annotate_loops, contact_stats_loops, quantile_linear
from safegrasp.config import CalibrationConfig, RewardWeights
from safegrasp.errors import CalibrationError
from safegrasp.rewards import (RewardAnnotation, SafetyCalibration,
                               annotate_episode, calibrate,
                               default_calibration_for, episode_reward,
                               episode_risk, step_exceedance, step_reward)
from safegrasp.tactile import ContactStats

W = RewardWeights()
CAL = default_calibration_for()


def fake_episode(frames, closed=None, success=False, drop=False, damage=False):
    frames = np.asarray(frames, float)
    if closed is None:
        closed = np.ones(frames.shape[0], bool)
    return SimpleNamespace(frames=frames, gripper_closed=np.asarray(closed),
                           success=success, drop=drop, damage=damage,
                           episode_id="fake")


def stats(f=0.3, p=None, c=0.05, cop=(0.5, 0.5), side="L"):
    return ContactStats(side, f, p if p is not None else min(1.0, 2 * f), c, cop)


def in_band():
    return {"L": stats(f=0.3, p=0.5, c=0.05),
            "R": stats(f=0.3, p=0.5, c=0.05, side="R")}


HELD = SimpleNamespace(holding=True, slip=False)
FREE = SimpleNamespace(holding=False, slip=False)


# -- step reward --------------------------------------------------------------


def test_in_band_reward_is_zero():
    assert step_reward(in_band(), HELD, CAL, W) == 0.0


def test_over_force_penalty_value():
    st = in_band()
    st["L"] = stats(f=CAL.f_max + 0.1, p=0.5, c=0.05)
    # only the over-force hinge fires: -(0.1^2) with unit weight, plus the
    # asymmetry hinge on the 0.4 gap over delta 0.1: -0.5 * 0.3^2
    expect = -(0.1 ** 2) - 0.5 * (abs(st["L"].mean_force - 0.3) - CAL.delta) ** 2
    assert step_reward(st, FREE, CAL, W) == pytest.approx(expect, abs=1e-12)


def test_asymmetry_penalty_value():
    st = {"L": stats(f=0.3, p=0.5, c=0.05),
          "R": stats(f=0.3 + CAL.delta + 0.2, p=0.5, c=0.05, side="R")}
    base = step_reward(in_band(), FREE, CAL, W)
    got = step_reward(st, FREE, CAL, W)
    assert base == 0.0
    assert got == pytest.approx(-0.5 * 0.2 ** 2, abs=1e-12)


def test_under_force_only_while_holding():
    st = {"L": stats(f=CAL.f_min / 2, p=0.1, c=0.05),
          "R": stats(f=CAL.f_min / 2, p=0.1, c=0.05, side="R")}
    assert step_reward(st, FREE, CAL, W) == 0.0
    expect = -2 * W.lambda_low * (CAL.f_min / 2) ** 2
    assert step_reward(st, HELD, CAL, W) == pytest.approx(expect, abs=1e-12)


def test_slip_penalty_is_flat():
    slipped = SimpleNamespace(holding=True, slip=True)
    assert step_reward(in_band(), slipped, CAL, W) == -W.lambda_slip


def test_reward_never_positive():
    rng = np.random.default_rng(3)
    for _ in range(200):
        st = {"L": stats(f=rng.random(), p=rng.random(), c=rng.random()),
              "R": stats(f=rng.random(), p=rng.random(), c=rng.random(),
                         side="R")}
        hs = SimpleNamespace(holding=bool(rng.integers(2)),
                             slip=bool(rng.integers(2)))
        hs = SimpleNamespace(holding=hs.holding, slip=hs.slip and hs.holding)
        assert step_reward(st, hs, CAL, W) <= 0.0


def test_over_force_monotone():
    last = 0.0
    for extra in (0.0, 0.05, 0.1, 0.2, 0.4):
        st = in_band()
        st["L"] = stats(f=CAL.f_max + extra, p=0.5, c=0.05)
        st["R"] = stats(f=CAL.f_max + extra, p=0.5, c=0.05, side="R")
        r = step_reward(st, FREE, CAL, W)
        assert r <= last
        last = r


# -- exceedance and risk ------------------------------------------------------


def test_exceedance_relative_and_floored():
    st = in_band()
    assert step_exceedance(st, CAL) == 0.0
    st["L"] = stats(f=CAL.f_max * 1.5, p=0.5, c=0.05)
    assert step_exceedance(st, CAL) == pytest.approx(0.5, abs=1e-12)


def test_risk_empty_holding_is_zero():
    assert episode_risk(np.zeros(10), np.zeros(10, bool), np.zeros(10, bool),
                        10) == 0.0


def test_risk_clips_at_one():
    e = np.full(10, 5.0)
    held = np.ones(10, bool)
    assert episode_risk(e, held, np.zeros(10, bool), 10) == 1.0


def test_risk_slip_term_value():
    slips = np.zeros(10, bool)
    slips[:4] = True
    assert episode_risk(np.zeros(10), np.zeros(10, bool), slips, 10) == \
        pytest.approx(0.2, abs=1e-12)


def test_risk_monotone_in_slips():
    prev = -1.0
    for k in range(6):
        slips = np.zeros(12, bool)
        slips[:k] = True
        r = episode_risk(np.zeros(12), np.zeros(12, bool), slips, 12)
        assert r >= prev
        prev = r


def test_risk_rejects_empty_episode():
    with pytest.raises(ValueError):
        episode_risk([], [], [], 0)


# -- episode reward -----------------------------------------------------------


def test_success_bonus():
    r_step, r_epi = episode_reward(np.zeros(8), 0.0, True, False, False, W)
    assert r_step == 0.0 and r_epi == 1.0


def test_all_zero_episode():
    assert episode_reward(np.zeros(8), 0.0, False, False, False, W) == (0.0, 0.0)


def test_damage_and_risk_sum():
    r = np.full(4, -0.5)
    r_step, r_epi = episode_reward(r, 1.0, False, False, True, W)
    assert r_step == -0.5
    assert r_epi == pytest.approx(-3.0, abs=1e-12)


def test_success_and_damage_may_coexist():
    _, r_epi = episode_reward(np.zeros(4), 0.0, True, False, True, W)
    assert r_epi == pytest.approx(W.r_succ - W.r_damage)


# -- calibration --------------------------------------------------------------


def test_calibrate_rejects_empty():
    with pytest.raises(CalibrationError):
        calibrate([])


def test_calibrate_rejects_no_contact():
    eps = [fake_episode(np.zeros((20, 2, 10, 10)))]
    with pytest.raises(CalibrationError):
        calibrate(eps)


def test_calibrate_rejects_constant_forces():
    frames = np.zeros((30, 2, 10, 10))
    frames[:, :, 4:6, 4:6] = 5.0
    with pytest.raises(CalibrationError, match="uniform"):
        calibrate([fake_episode(frames)])


def test_calibrate_inactive_side_excluded():
    rng = np.random.default_rng(1)
    frames = np.zeros((60, 2, 10, 10))
    frames[:, 0, 3:7, 3:7] = 4.0 + rng.random((60, 4, 4))
    frames[:, 1] = 0.01  # right pad never sees real contact
    calib = calibrate([fake_episode(frames)])
    assert calib.active_sides == ("L",)


def test_calibrate_matches_independent_recomputation(demo_episodes,
                                                     demo_calibration):
    cfg = CalibrationConfig()
    calib = demo_calibration

    all_vals = np.concatenate([np.asarray(e.frames, float).ravel()
                               for e in demo_episodes])
    scale = quantile_linear(all_vals, cfg.norm_quantile)
    assert calib.norm_scale == pytest.approx(scale, rel=1e-12)

    for idx, side in enumerate(("L", "R")):
        vals = np.concatenate([np.asarray(e.frames, float)[:, idx].ravel()
                               for e in demo_episodes])
        active = quantile_linear(vals / scale, cfg.active_quantile) > \
            cfg.active_threshold
        assert (side in calib.active_sides) == active

    forces, peaks, concs, asyms = [], [], [], []
    for ep in demo_episodes:
        streak = 0
        for t in range(ep.frames.shape[0]):
            per_side = {}
            for idx, side in enumerate(("L", "R")):
                if side not in calib.active_sides:
                    continue
                norm = np.clip(np.asarray(ep.frames[t][idx], float) / scale,
                               0, 1)
                per_side[side] = contact_stats_loops(norm, cfg.eps)
            ok = bool(ep.gripper_closed[t]) and all(
                s[0] >= cfg.f_contact for s in per_side.values())
            streak = streak + 1 if ok else 0
            if streak < cfg.n_hold:
                continue
            for side, s in per_side.items():
                forces.append(s[0])
                peaks.append(s[1])
                concs.append(s[2])
            if "L" in per_side and "R" in per_side:
                asyms.append(abs(per_side["L"][0] - per_side["R"][0]))

    assert calib.f_min == pytest.approx(
        quantile_linear(forces, cfg.force_low_quantile), rel=1e-9)
    assert calib.f_max == pytest.approx(
        quantile_linear(forces, cfg.force_high_quantile), rel=1e-9)
    assert calib.p_max == pytest.approx(
        quantile_linear(peaks, cfg.peak_quantile), rel=1e-9)
    assert calib.c_max == pytest.approx(
        quantile_linear(concs, cfg.conc_quantile), rel=1e-9)
    assert calib.delta == pytest.approx(
        quantile_linear(asyms, cfg.asym_quantile), rel=1e-9)


def test_calibration_dict_round_trip(demo_calibration):
    back = SafetyCalibration.from_dict(demo_calibration.to_dict())
    assert back == demo_calibration


# -- full annotation ----------------------------------------------------------


def test_annotate_zero_episode_outcome_terms_only():
    ep = fake_episode(np.zeros((12, 2, 10, 10)),
                      closed=np.zeros(12, bool), success=True)
    ann = annotate_episode(ep, CAL, W)
    assert np.all(ann.step_rewards == 0.0)
    assert ann.risk == 0.0
    assert ann.r_episode == W.r_succ


def test_annotate_matches_loop_oracle(demo_episodes, demo_calibration):
    for ep in demo_episodes[:6]:
        ann = annotate_episode(ep, demo_calibration, W)
        ref = annotate_loops(ep.frames, ep.gripper_closed, ep.success,
                             ep.drop, ep.damage, demo_calibration, W)
        np.testing.assert_allclose(ann.step_rewards, ref["step_rewards"],
                                   atol=1e-9)
        np.testing.assert_allclose(ann.exceedances, ref["exceedances"],
                                   atol=1e-9)
        assert list(ann.slips) == ref["slips"]
        assert list(ann.holding) == ref["holding"]
        assert ann.risk == pytest.approx(ref["risk"], abs=1e-9)
        assert ann.r_episode == pytest.approx(ref["r_episode"], abs=1e-9)


def test_annotate_deterministic(demo_episodes, demo_calibration):
    ep = demo_episodes[0]
    a = annotate_episode(ep, demo_calibration, W)
    b = annotate_episode(ep, demo_calibration, W)
    assert np.array_equal(a.step_rewards, b.step_rewards)
    assert a.r_episode == b.r_episode


def test_damage_costs_more_than_success(demo_episodes, demo_calibration):
    by_kind = {}
    for ep in demo_episodes:
        by_kind.setdefault(ep.kind, ep)
    clean = annotate_episode(by_kind["clean"], demo_calibration, W)
    over = annotate_episode(by_kind["over_force"], demo_calibration, W)
    assert over.r_episode < clean.r_episode


def test_annotation_dict_round_trip(demo_episodes, demo_calibration):
    ann = annotate_episode(demo_episodes[0], demo_calibration, W)
    back = RewardAnnotation.from_dict(ann.to_dict())
    assert np.array_equal(back.step_rewards, ann.step_rewards)
    assert np.array_equal(back.slips, ann.slips)
    assert back.risk == ann.risk and back.r_episode == ann.r_episode
