"""RRT(1) against UV(gamma) for gamma in 0.1..0.5 on the first-example data."""

from _runner import run_preset

if __name__ == "__main__":
    run_preset("uv_comparison", __doc__)
