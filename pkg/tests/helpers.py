"""Shared builders for the test suite."""
from __future__ import annotations

import numpy as np

from beatpose.beatmap import Beatmap
from beatpose.context import ContextConfig, build_training_window, example_arrays, select_style_references, stack_examples
from beatpose.pose import PoseTrace, quat_normalize
from beatpose.synthetic import PlayerStyle, play_beatmap, random_beatmap


def random_quats(rng, n):
    return quat_normalize(rng.normal(size=(n, 4)))


def random_trace(rng, n_frames, rate=30.0, start=0.0):
    """Smooth-ish random 3-point trace with the head upright."""
    times = start + np.arange(n_frames) / rate
    base = np.array([[0.0, 1.7, 0.0], [-0.3, 1.2, 0.2], [0.3, 1.2, 0.2]])
    freqs = rng.uniform(0.2, 2.0, size=(3, 3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(3, 3, 3))
    amp = rng.uniform(0.0, 0.2, size=(3, 3, 3))
    wave = np.sum(amp * np.sin(2 * np.pi * freqs * times[:, None, None, None] + phase), axis=-1)
    positions = base + wave
    yaw = rng.uniform(-np.pi, np.pi) + 0.3 * np.sin(times * rng.uniform(0.5, 2))
    head = np.stack([np.cos(yaw / 2), 0.1 * np.sin(times), np.sin(yaw / 2), 0.05 * np.cos(times)], -1)
    rotations = np.empty((n_frames, 3, 4))
    rotations[:, 0] = quat_normalize(head)
    rotations[:, 1:] = random_quats(rng, 2)[None] + 0.1 * np.sin(times)[:, None, None]
    rotations[:, 1:] = quat_normalize(rotations[:, 1:])
    return PoseTrace(times, positions, rotations, float(rate))


def scoring_case(seed):
    """A beatmap and a noisy scripted performance of it."""
    rng = np.random.default_rng(seed)
    bm = random_beatmap(rng, n_beats=int(rng.integers(12, 28)), bpm=float(rng.uniform(90, 160)),
                        bomb_rate=0.4, obstacle_rate=0.08)
    style = PlayerStyle(swing_length=rng.uniform(0.2, 0.9), swing_speed=rng.uniform(0.5, 4.0),
                        sway=rng.uniform(0, 0.1), sway_hz=rng.uniform(0.2, 1.2),
                        hand_reach=rng.uniform(-0.1, 0.4))
    tr = play_beatmap(bm, style, rng=rng)
    t = tr.times
    noise = np.zeros_like(tr.positions)
    for _ in range(3):
        f = rng.uniform(0.3, 3.0)
        noise += rng.uniform(0, 0.15) * np.sin(2 * np.pi * f * t[:, None, None] + rng.uniform(0, 6.3, size=(1, 3, 3)))
    positions = tr.positions + noise
    if rng.random() < 0.3:
        positions[:, [1, 2]] = positions[:, [2, 1]]
    return bm, PoseTrace(tr.times, positions, tr.rotations, tr.rate)


def toy_examples(n_examples=4, h=2, T=3, n=2, n_ref=2, seed=0, trace_len=None):
    """Array batch of real windows cut from a scripted performance."""
    rng = np.random.default_rng(seed)
    bm = random_beatmap(rng, n_beats=24)
    tr = play_beatmap(bm, PlayerStyle.preset("energetic"), rng=rng)
    cfg = ContextConfig(h=h, T=T, n=n, n_ref=n_ref)
    refs = select_style_references(tr, n_ref, T, seed)
    idx = np.linspace(h + 20, len(tr) - T - 2, n_examples).astype(int)
    exs = [build_training_window(tr, bm, float(tr.times[i]), cfg, refs) for i in idx]
    return stack_examples([example_arrays(e) for e in exs]), exs, bm, tr


def empty_beatmap(song_length=4.0):
    return Beatmap(120.0, (), (), (), song_length)


TOY_TOML = """seed = 42
[context]
h = 4
T = 6
n = 2
n_ref = 2
stride = 2
[model]
d_z = 8
width = 16
[train]
steps = {steps}
[rollout]
stride = 3
blend = 1
"""


def run_chain(root, seed=42, steps=200, demo_seed=0):
    """Synthesize inputs under root/in and run dataset, train, rollout, eval via the CLI."""
    from pathlib import Path

    from beatpose.cli import main
    from beatpose.synthetic import write_demo

    root = Path(root)
    inp = root / "in"
    write_demo(inp, demo_seed)
    cfg = root / "cfg.toml"
    cfg.write_text(TOY_TOML.format(steps=steps))
    base = ["--config", str(cfg), "--seed", str(seed)]
    steps_run = [
        ["--out", str(root / "ds"), "dataset", str(inp / "manifest.json")],
        ["--out", str(root / "tr"), "train", str(root / "ds" / "dataset.bin")],
        ["--out", str(root / "ro"), "rollout", str(root / "tr" / "checkpoint.bpck"),
         str(inp / "beatmap.json"), "--donor", str(inp / "donor.csv")],
        ["--out", str(root / "ev"), "eval", str(root / "ro" / "trace.csv"), str(inp / "beatmap.json"),
         "--checkpoint", str(root / "tr" / "checkpoint.bpck"), "--donor", str(inp / "donor.csv")],
    ]
    for argv in steps_run:
        code = main(base + argv)
        if code != 0:
            raise RuntimeError(f"command {argv} exited {code}")
    return root
