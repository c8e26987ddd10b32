"""Acceptance suite: one test per criterion, each at its stated tolerance and time limit."""
import json
import math
from pathlib import Path

import numpy as np

from acceptance_log import criterion
from helpers import random_quats, random_trace, run_chain, scoring_case, toy_examples

from beatpose.beatmap import (
    BeatmapError, BeatmapValidationError, beats_to_seconds, parse_beatmap, serialize_beatmap,
    validate_beatmap,
)
from beatpose.cli import gradcheck_batch
from beatpose.context import BOMB_FEATURES, NOTE_FEATURES, OBSTACLE_FEATURES, ContextConfig
from beatpose.estimator import StylePosePredictor
from beatpose.evaluation import oracle_score, score_hits
from beatpose.model import (
    ModelConfig, encode_game, encode_style, gradient_check, init_params, loss_and_grad, loss_match,
    predict,
)
from beatpose.pose import (
    AnchorTransform, PoseWindow, canonicalize_window, hold_pose, quat_angle, quat_normalize,
    rotation_from_6d, rotation_to_6d, yaw_quat,
)
from beatpose.rollout import RolloutConfig, rollout
from beatpose.synthetic import random_beatmap

FIXTURES = Path(__file__).parent / "fixtures"


def test_criterion_01_parser_corpus():
    expected = json.loads((FIXTURES / "expected_beatmaps.json").read_text())
    with criterion(1, "parser corpus parse/validate/round-trip", 5.0):
        kinds = {e["kind"] for e in expected.values()}
        assert len(expected) >= 12 and {"valid", "violation"} <= kinds
        assert any(n.startswith("empty") for n in expected) and any(n.startswith("ties") for n in expected)
        for name, exp in sorted(expected.items()):
            raw = (FIXTURES / "beatmaps" / name).read_bytes()
            if exp["kind"] == "valid":
                bm = parse_beatmap(raw)
                assert validate_beatmap(bm) == [], name
                assert parse_beatmap(serialize_beatmap(bm)) == bm, name
                continue
            try:
                parse_beatmap(raw)
            except BeatmapValidationError as exc:
                assert exp["kind"] == "violation", name
                v = exc.violations
                assert len(v) == 1 and (v[0].category, v[0].index, v[0].field) == (
                    exp["category"], exp["index"], exp["field"]), name
            except BeatmapError:
                assert exp["kind"] in ("parse", "schema"), name
            else:
                raise AssertionError(f"{name} was accepted")


def test_criterion_02_timing_exactness():
    with criterion(2, "beats_to_seconds cases bit-exact and linear in beat"):
        assert beats_to_seconds(2.0, 120) == 1.0
        assert beats_to_seconds(0.0, 90) == 0.0
        assert beats_to_seconds(1.0, 60) == 1.0
        rng = np.random.default_rng(2)
        for _ in range(1000):
            bpm = float(rng.uniform(30, 300))
            beat = float(rng.integers(0, 4096)) / 8  # dyadic beats keep sums exact
            other = float(rng.integers(0, 4096)) / 8
            k = float(2 ** int(rng.integers(-3, 4)))
            assert beats_to_seconds(k * beat, bpm) == k * beats_to_seconds(beat, bpm)
            # additivity holds up to the rounding of the sum itself
            total = beats_to_seconds(beat + other, bpm)
            parts = beats_to_seconds(beat, bpm) + beats_to_seconds(other, bpm)
            assert abs(total - parts) <= 2 * np.spacing(total)


def test_criterion_03_se2_invariance():
    rng = np.random.default_rng(3)
    with criterion(3, "SE(2) invariance of 1000 canonical windows within 1e-6", 30.0):
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 12))
            w = random_trace(rng, n).slice(0, n)
            a = AnchorTransform(float(rng.uniform(-math.pi, math.pi)), tuple(rng.uniform(-50, 50, 2)))
            moved = PoseWindow(w.times, a.apply_points(w.positions), a.apply_rotations(w.rotations))
            f0 = canonicalize_window(w)[0].features()
            f1 = canonicalize_window(moved)[0].features()
            worst = max(worst, float(np.max(np.abs(f0 - f1))))
        assert worst < 1e-6, f"max deviation {worst:.3g}"


def test_criterion_04_rotation_round_trip():
    with criterion(4, "6d rotation round trip of 1000 rotations < 1e-6 rad"):
        q = random_quats(np.random.default_rng(4), 1000)
        err = float(np.max(quat_angle(rotation_from_6d(rotation_to_6d(q)), q)))
        assert err < 1e-6, f"max angle {err:.3g}"


def test_criterion_05_gradient_check():
    with criterion(5, "gradient check < 1e-4 and corrupted layer > 1e-2", 60.0):
        params, batch = gradcheck_batch(0)
        cfg = ModelConfig(d_z=4, width=8, h=2, T=3, n=2, n_ref=2)
        assert cfg.width <= 8 and params["e3p.w2"].shape == (cfg.width, cfg.d_z)
        assert batch["history"].shape[1:] == (3, 27) and batch["refs"].shape[1:3] == (2, 3)
        assert params["dec.w1"].dtype == np.float64
        err = gradient_check(params, batch)
        assert err < 1e-4, f"max relative error {err:.3g}"

        def corrupted(p, b, lam):
            lb, g = loss_and_grad(p, b, lam)
            g = dict(g)
            g["dec.w1"] = g["dec.w1"] * 1.5 + 1e-3
            return lb, g

        bad = gradient_check(params, batch, grad_fn=corrupted)
        assert bad > 1e-2, f"mutation gave only {bad:.3g}"


def test_criterion_06_overfit():
    batch, _, _, _ = toy_examples(4, h=4, T=6, n=2, n_ref=2)
    with criterion(6, "overfit 4 examples: recon < 1e-3, 200-step moving average decreasing", 120.0):
        est = StylePosePredictor(d_z=8, width=32, lr=0.02, n_steps=2000, lr_schedule="cosine").fit(batch)
        total = np.array([lb.total for lb in est.loss_history_])
        recon = est.loss_history_[-1].recon
        assert len(total) <= 2000
        assert recon < 1e-3, f"final recon {recon:.3g}"
        ma = np.convolve(total, np.ones(200) / 200, mode="valid")
        worst = float(np.max(np.diff(ma)))
        assert worst <= 0.0, f"moving average rose by {worst:.3g}"


def test_criterion_07_match_fixed_point():
    batch, _, _, _ = toy_examples(2, h=2, T=3, n=2, n_ref=2)
    params = init_params(ModelConfig(d_z=4, width=8, h=2, T=3, n=2, n_ref=2), 7)
    with criterion(7, "matching loss is exactly 0 at its fixed point"):
        pred = predict(params, batch)[0]
        assert loss_match(pred, pred[None], params) == 0.0
        # the training loss path, with each prediction as its own reference latent
        preds = predict(params, batch)
        own = np.stack([encode_style(params, p[None]) for p in preds])
        lb, _ = loss_and_grad(params, batch, 0.1, need_grad=False, style_target=own)
        assert lb.match == 0.0, f"match {lb.match!r}"


def test_criterion_08_permutation_and_mask():
    params = init_params(ModelConfig(d_z=4, width=8, h=2, T=3, n=4, n_ref=4), 8)
    rng = np.random.default_rng(8)
    widths = {"notes": NOTE_FEATURES, "bombs": BOMB_FEATURES, "obstacles": OBSTACLE_FEATURES}
    with criterion(8, "set encoders invariant to permutation and masked rows within 1e-9"):
        worst = 0.0
        for _ in range(100):
            ctx = {}
            for cat, w in widths.items():
                ctx[cat] = rng.normal(size=(4, w))
                ctx[f"{cat}_mask"] = (rng.random(4) < 0.7).astype(float)
            base = encode_game(params, ctx)
            perm = dict(ctx)
            for cat in widths:
                p = rng.permutation(4)
                perm[cat], perm[f"{cat}_mask"] = ctx[cat][p], ctx[f"{cat}_mask"][p]
            injected = dict(ctx)
            for cat, w in widths.items():
                junk = rng.normal(scale=100, size=(3, w))
                injected[cat] = np.vstack([ctx[cat], junk])
                injected[f"{cat}_mask"] = np.append(ctx[f"{cat}_mask"], np.zeros(3))
                masked = ctx[f"{cat}_mask"] == 0
                injected[cat][:4][masked] = rng.normal(scale=100, size=(int(masked.sum()), w))
            refs = rng.normal(size=(4, 3, 27))
            zs = encode_style(params, refs)
            for other in (encode_game(params, perm), encode_game(params, injected)):
                worst = max(worst, float(np.max(np.abs(other - base))))
            worst = max(worst, float(np.max(np.abs(encode_style(params, refs[rng.permutation(4)]) - zs))))
        assert worst < 1e-9, f"max deviation {worst:.3g}"


def test_criterion_09_scoring_oracle():
    with criterion(9, "scorer matches supersampled oracle on 100 cases", 120.0):
        bad = []
        for seed in range(100):
            bm, trace = scoring_case(seed)
            rep = score_hits(trace, bm)
            outcomes, bombs, walls = oracle_score(trace, bm)
            if (rep.outcomes, rep.bomb_touches, rep.obstacle_collisions) != (outcomes, bombs, walls):
                bad.append(seed)
        assert not bad, f"disagreement on seeds {bad}"


def test_criterion_10_constant_rollout():
    ctx = ContextConfig(h=4, T=6, n=2, n_ref=2)

    def constant(history, _ctx):
        return PoseWindow(np.zeros(ctx.T), np.repeat(history.positions[-1:], ctx.T, 0),
                          np.repeat(history.rotations[-1:], ctx.T, 0))

    with criterion(10, "constant predictor rollout continues the seed pose exactly"):
        p = np.array([[0.4, 1.65, -0.3], [-0.1, 1.1, 0.2], [0.5, 1.3, 0.0]])
        q = np.stack([yaw_quat(2.1), quat_normalize(np.array([0.2, 0.5, -0.1, 0.8])), yaw_quat(-0.4)])
        for stride, blend in ((1, 0), (3, 2), (6, 0)):
            seed = hold_pose(p, q, ctx.h + 1, ctx.rate)
            bm = random_beatmap(10, n_beats=12)
            out = rollout(constant, bm, None, RolloutConfig(stride, blend, seed), ctx)
            assert len(out) > ctx.h + 1
            assert np.max(np.abs(np.diff(out.positions[ctx.h:], axis=0))) == 0.0
            assert np.array_equal(out.rotations[ctx.h:], np.repeat(q[None], len(out) - ctx.h, 0))
            grid_err = float(np.max(np.abs(out.times - np.arange(len(out)) / ctx.rate)))
            assert grid_err <= 1e-9, f"grid error {grid_err:.3g}"


def test_criterion_11_end_to_end_determinism(tmp_path):
    with criterion(11, "dataset, train, rollout, eval twice with seed 42 are byte-identical", 300.0):
        a = run_chain(tmp_path / "a", seed=42, steps=200)
        b = run_chain(tmp_path / "b", seed=42, steps=200)
        for rel in ("ds/dataset.bin", "ro/trace.csv", "ev/report.json"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), f"{rel} differs"
        assert json.loads((a / "tr/checkpoint.json").read_text())["steps"] == 200
