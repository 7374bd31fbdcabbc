"""Smoke test for the compiled `pocca` extension.

Build and run from the repository root:

    cargo build -p pocca-py --release
    cp target/release/libpocca.so python/pocca.so
    python3 python/smoke_test.py
"""

import json
import math
import random
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import pocca  # noqa: E402


def main():
    rng = random.Random(0)
    points = [[rng.uniform(-1, 1) for _ in range(3)] for _ in range(256)]

    picked = pocca.fps(points, 8, seed=0)
    assert len(set(picked)) == 8 and picked[0] == 0

    near = pocca.knn(points, points[5], 4)
    assert near[0] == 5
    dists = [math.dist(points[i], points[5]) for i in near]
    assert dists == sorted(dists)

    for p, z, want in [([1.0, 0.0], [2.0, 0.0], 0.0), ([1.0, 0.0], [0.0, 3.0], 2.0), ([1.0, 1.0], [-1.0, -1.0], 4.0)]:
        assert abs(pocca.similarity_loss(p, z) - want) < 1e-9

    cfg = pocca.RunConfig.desk()
    moved = cfg.with_overrides(["output_dir=/tmp/elsewhere"])
    assert moved.hash() == cfg.hash()
    tuned = cfg.with_overrides(["train.lr=0.001"])
    assert tuned.hash() != cfg.hash()
    assert json.loads(tuned.to_json())["train"]["lr"] == 0.001
    assert pocca.RunConfig.from_json(cfg.to_json()).hash() == cfg.hash()
    try:
        cfg.with_overrides(["train.tau=2.0"])
    except ValueError:
        pass
    else:
        raise AssertionError("invalid tau accepted")

    patches, kernels, scales = pocca.sample_patches(points, cfg, seed=1)
    assert len(patches) == 12 and all(len(p) == 16 for p in patches)
    assert sorted(set(scales)) == [0, 1, 2] and all(0 <= k < 256 for k in kernels)

    passed, lines = pocca.gradcheck()
    assert passed and lines, lines

    with tempfile.TemporaryDirectory() as tmp:
        small = cfg.with_overrides([
            f"output_dir={tmp}/run",
            "model.dim=16",
            "model.encoder_hidden=[16,16]",
            "model.heads=2",
            "train.epochs=1",
            "train.batch_size=4",
            "views.global_points=32",
            "views.sampler.n_patches_per_scale=2",
            "views.sampler.patch_size=8",
            "dataset.train_per_class=4",
            "dataset.test_per_class=4",
            "dataset.points=64",
            "probe.few_shot=[[3,2]]",
            "probe.episodes=3",
        ])
        summary = pocca.pretrain(small)
        assert summary["finished"] and summary["steps_run"] == 6, summary
        assert 0.0 <= summary["final_loss"] <= 8.0

        encoder_path = f"{tmp}/run/encoder.pcck"
        report = pocca.probe(checkpoint=encoder_path, output_dir=f"{tmp}/probe")
        assert 0.0 <= report["accuracy"] <= 1.0
        assert report["few_shot"][0][:2] == (3, 2)

        enc = pocca.Encoder.load(encoder_path)
        assert enc.dim == 16
        cloud = points[:64]
        shuffled = cloud[:]
        rng.shuffle(shuffled)
        a, b = enc.encode([cloud, shuffled])
        assert a == b and len(a) == 16

    fresh = pocca.Encoder.random(seed=3)
    assert fresh.dim == 64 and len(fresh.encode([points])[0]) == 64

    print("python smoke test passed")


if __name__ == "__main__":
    main()
