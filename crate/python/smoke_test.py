"""Smoke test for the trajsim Python bindings.

Build and install first:

    pip install --no-build-isolation ./crates/py
    python python/smoke_test.py
"""

import math
import os
import tempfile

import trajsim

HERE = os.path.dirname(os.path.abspath(__file__))
QUICK = os.path.join(HERE, "..", "configs", "quick.toml")


def main():
    assert trajsim.grid_size() == 1368
    assert trajsim.grid_size(QUICK) == 72 * 13
    thetas = trajsim.candidate_thetas()
    assert thetas[0] == 65.0 and thetas[-1] == 115.0 and len(thetas) == 11

    scene = trajsim.Scene.chest(3)
    assert scene.n_metal == 2
    d2 = scene.view_d2(0.0, 90.0, QUICK)
    assert d2 >= 0.0 and math.isfinite(d2)

    rows, cols, line = scene.project(0.0, 90.0, config=QUICK)
    assert (rows, cols) == (64, 64) and len(line) == rows * cols
    assert max(line) > 0.0
    _, _, counts = scene.project(0.0, 90.0, i0=500.0, noise_seed=7, config=QUICK)
    _, _, again = scene.project(0.0, 90.0, i0=500.0, noise_seed=7, config=QUICK)
    assert counts == again

    planned = scene.plan(config=QUICK)
    planar = trajsim.planar(0.0, 60.0)
    assert len(planned) == len(planar) == 12
    assert scene.accumulated_d2(planned, QUICK) >= scene.accumulated_d2(planar, QUICK)
    assert trajsim.trajectory_distance(planar, planar) == 0.0

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "scene.txt")
        with open(path, "w") as f:
            f.write(scene.scene_text())
        back = trajsim.Scene.from_file(path)
        assert back.n_primitives == scene.n_primitives
        assert back.task_center == scene.task_center

        bad = os.path.join(tmp, "bad.toml")
        with open(bad, "w") as f:
            f.write("theta_min = 120.0\ntheta_max = 60.0\n")
        try:
            trajsim.grid_size(bad)
        except ValueError as e:
            assert "theta_max" in str(e)
        else:
            raise AssertionError("inverted theta range accepted")

    try:
        trajsim.Regressor.load("/nonexistent/model.bin")
    except OSError:
        pass
    else:
        raise AssertionError("missing model loaded")

    print("smoke test ok: %d planned views, sum d2 %.4g vs planar %.4g"
          % (len(planned), scene.accumulated_d2(planned, QUICK), scene.accumulated_d2(planar, QUICK)))


if __name__ == "__main__":
    main()
