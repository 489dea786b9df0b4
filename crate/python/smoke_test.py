#!/usr/bin/env python3
"""Smoke test for the motion_align_py extension module.

Build the extension first:

    cargo build -p motion-align-py --release

The script locates the compiled cdylib under target/, stages it as an
importable module, and exercises the main types and operations.
"""

import math
import pathlib
import shutil
import sys
import tempfile


def stage_extension() -> pathlib.Path:
    root = pathlib.Path(__file__).resolve().parents[1]
    candidates = [
        root / "target" / "release" / "libmotion_align_py.so",
        root / "target" / "debug" / "libmotion_align_py.so",
    ]
    src = next((p for p in candidates if p.exists()), None)
    if src is None:
        sys.exit(
            "libmotion_align_py.so not found; run "
            "`cargo build -p motion-align-py --release` first"
        )
    stage = pathlib.Path(tempfile.mkdtemp(prefix="motion_align_py_"))
    shutil.copy2(src, stage / "motion_align_py.so")
    sys.path.insert(0, str(stage))
    return stage


stage_extension()
import motion_align_py as ma  # noqa: E402


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


# --- domain ---------------------------------------------------------------
prompt = ma.PromptSpec("circle", speed=1.2, amplitude=0.8, direction=0.5, prompt_id=7)
assert prompt.action == "circle"

motion = ma.generate_ground_truth(prompt, frames=60, seed=3, noise_scale=0.0)
assert motion.frames == 60
assert motion.features == ma.FEATURE_COUNT

# Noise-free circles keep the root at the fitted radius.
cx = -0.8 * math.cos(0.5)
cy = -0.8 * math.sin(0.5)
for row in motion.data:
    d = math.hypot(row[0] - cx, row[1] - cy)
    approx(d, 0.8, 1e-9)

tokens = ma.render_tokens(prompt)
words = ma.token_words(tokens)
assert words[:2] == ["a", "person"] and words[2] == "circles"
assert len(ma.vocabulary()) >= 24

# Determinism of generation.
again = ma.generate_ground_truth(prompt, frames=60, seed=3, noise_scale=0.0)
assert motion.data == again.data

# --- judge ----------------------------------------------------------------
approx(ma.oracle_score(prompt, motion), 0.0, 1e-9)
assert ma.best_fit_action(motion) == "circle"

wrong = ma.PromptSpec("jump", speed=1.2, amplitude=0.8, direction=0.5)
assert ma.oracle_score(wrong, motion) < -1e-3

features = ma.oracle_features(motion)
assert len(features) == 10 and all(math.isfinite(v) for v in features)

# --- diffusion primitives ---------------------------------------------------
sched = ma.make_schedule("linear", 100, 1e-3, 0.2)
assert sched.t_max == 100
assert all(b2 < b1 for b1, b2 in zip(sched.alpha_bars, sched.alpha_bars[1:]))

x0 = [1.0, -2.0, 0.5]
noised = ma.q_sample(x0, 50, [0.0, 0.0, 0.0], sched)
scale = math.sqrt(sched.alpha_bars[49])
for a, b in zip(noised, x0):
    approx(a, scale * b, 1e-12)

# --- pair machinery ---------------------------------------------------------
assert ma.pair_count(8) == 28
w, l = ma.selection_ranks(8, "edge")
assert (w, l) == (0, 7)
for seed in range(50):
    w, l = ma.selection_ranks(8, "stochastic", seed=seed)
    assert 0 <= w < 4 and 4 <= l < 8

# DPO loss identity: zero bracket -> ln 2.
approx(ma.dpo_loss_from_errors(1.0, 1.0, 2.0, 2.0, 500.0), math.log(2.0), 1e-12)
# Known stub: bracket -2 at beta_eff 1.
approx(ma.dpo_loss_from_errors(0.5, 1.5, 2.0, 1.0, 1.0), math.log(1 + math.exp(-2)), 1e-12)

# --- metrics ----------------------------------------------------------------
import random  # noqa: E402

rng = random.Random(0)
a = [[rng.gauss(0, 1) for _ in range(4)] for _ in range(500)]
b = [[rng.gauss(0.5, 1) for _ in range(4)] for _ in range(500)]
zero = ma.fid_from_samples(a, a)
approx(zero, 0.0, 1e-8)
shifted = ma.fid_from_samples(a, b)
assert 0.5 < shifted < 2.0, shifted  # ~ 4 * 0.25 = 1.0 plus sampling noise

div_same = ma.diversity([[1.0, 2.0]] * 10, n_pairs=20, seed=1)
approx(div_same, 0.0)

approx(ma.gaussian_kl([0.0, 0.0], [1.0, 1.0]), 0.0, 1e-12)
approx(ma.gaussian_kl([1.0, 1.0], [1.0, 1.0]), 1.0, 1e-12)  # D/2 with D=2

print("smoke test passed")
